use proptest::prelude::*;

use smpdefault::bsde::{simulate_gamma, LinearBsdeSpec};
use smpdefault::logutility::{closed_form_pi_hat, ThetaFamily, WealthModel};
use smpdefault::paths::{build_filtration_path, build_paths, quadratic_variation_check, IntensitySpec, TimeGrid};
use smpdefault::regression::Projection;
use smpdefault::rng::RngSpec;
use smpdefault::sde::{euler_simulate_form, explicit_wealth_solution, CoefficientSet, ControlProcess, NoiseForm, WealthParams};
use smpdefault::smp::{estimate_j, AdjointPoint};
use smpdefault::timefn::TimeFn;
use smpdefault::Interval;

fn model(alpha: f64, beta: f64, mu: f64, lam: f64, horizon: f64) -> WealthModel<f64> {
    WealthModel {
        alpha: TimeFn::constant(alpha),
        beta: TimeFn::constant(beta),
        mu,
        intensity: IntensitySpec::constant(lam),
        s0: 1.0,
        theta: ThetaFamily::Constant { value: 1.0 },
        horizon,
    }
}

fn nonneg() -> Interval<f64> {
    Interval::new(0.0, f64::INFINITY)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn covariation_and_compensator_identities(seed in any::<u64>(), lam in 0.0..3.0f64, n in 2usize..40) {
        let int = IntensitySpec::constant(lam);
        let p = build_filtration_path(&TimeGrid::uniform(1.0, n).unwrap(), &int, RngSpec::new(seed, 0)).unwrap();
        prop_assert!(quadratic_variation_check(&p));
        for (k, &t) in p.grid.knots().iter().enumerate() {
            prop_assert!((p.m[k] - (p.h[k] - p.compensator[k])).abs() <= 1e-12);
            prop_assert!((p.compensator[k] - lam * t.min(p.tau)).abs() <= 1e-12);
            prop_assert_eq!(p.h[k], if t >= p.tau { 1.0 } else { 0.0 });
        }
    }

    #[test]
    fn paths_are_deterministic_and_coarsen_consistently(seed in any::<u64>(), stream in 0u64..1000, lam in 0.1..3.0f64, half in 2usize..20) {
        let int = IntensitySpec::constant(lam);
        let grid = TimeGrid::uniform(1.0, 2 * half).unwrap();
        let a = build_filtration_path(&grid, &int, RngSpec::new(seed, stream)).unwrap();
        let b = build_filtration_path(&grid, &int, RngSpec::new(seed, stream)).unwrap();
        prop_assert_eq!(&a.w, &b.w);
        prop_assert_eq!(a.tau, b.tau);
        let c = a.coarsen(2, &int).unwrap();
        prop_assert_eq!(c.tau, a.tau);
        for j in 0..=half {
            prop_assert!((c.base_w(j) - a.base_w(2 * j)).abs() <= 1e-12);
            prop_assert_eq!(c.base_h(j), a.base_h(2 * j));
        }
    }

    #[test]
    fn gamma_stays_positive(seed in any::<u64>(), a in -1.0..1.0f64, pi in -1.0..1.0f64, mu in -0.99..2.0f64, beta in -1.0..1.0f64, lam in 0.0..3.0f64) {
        let spec = LinearBsdeSpec::constant(0.0, a, pi, mu, beta, 1.0);
        let p = build_filtration_path(&TimeGrid::uniform(1.0, 16).unwrap(), &IntensitySpec::constant(lam), RngSpec::new(seed, 3)).unwrap();
        let g = simulate_gamma(&spec, &p, 0).unwrap();
        prop_assert!(g.gamma.iter().all(|&v| v > 0.0 && v.is_finite()));
    }

    #[test]
    fn wealth_positive_and_noise_forms_agree(seed in any::<u64>(), alpha in -0.5..0.5f64, beta in 0.0..1.0f64, mu in -0.95..1.0f64, u in 0.0..3.0f64, lam in 0.0..3.0f64) {
        let p = build_filtration_path(&TimeGrid::uniform(1.0, 20).unwrap(), &IntensitySpec::constant(lam), RngSpec::new(seed, 1)).unwrap();
        let ctl = ControlProcess::constant(u, nonneg());
        let params = WealthParams { alpha: TimeFn::constant(alpha), beta: TimeFn::constant(beta), mu };
        let exact = explicit_wealth_solution(&params, &ctl, &p, 0, 1.0).unwrap();
        prop_assert!(exact.x.iter().all(|&x| x > 0.0));
        let c = CoefficientSet::wealth(params.alpha.clone(), params.beta.clone(), mu, 1.0, u.max(1.0));
        let a = euler_simulate_form(&c, &ctl, &p, 0, 1.0, NoiseForm::Indicator).unwrap();
        let b = euler_simulate_form(&c, &ctl, &p, 0, 1.0, NoiseForm::Martingale).unwrap();
        for (x, y) in a.x.iter().zip(&b.x) {
            prop_assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
        }
    }

    #[test]
    fn hamiltonian_partials_match_differences(x in 0.5..3.0f64, u in 0.1..3.0f64, p in -2.0..2.0f64, q in -2.0..2.0f64, w in -2.0..2.0f64, lam in 0.0..1.0f64) {
        let problem = model(0.05, 0.2, -0.5, 0.3, 1.0).problem(3.0);
        let err = problem.partials_mismatch(&[(0.3, x, u, AdjointPoint { p, q, w }, lam)]);
        prop_assert!(err < 1e-6, "mismatch {}", err);
    }

    #[test]
    fn pi_hat_ignores_market_parameters(alpha in -0.5..0.5f64, beta in 0.05..1.0f64, mu in -0.95..1.0f64, lam in 0.0..3.0f64, horizon in 0.5..2.0f64) {
        let m = model(alpha, beta, mu, lam, horizon);
        let paths = build_paths(&TimeGrid::uniform(horizon, 10).unwrap(), &m.intensity, 5, 20).unwrap();
        let opt = closed_form_pi_hat(&m, &paths).unwrap();
        for row in &opt.pi_hat {
            for (j, v) in row.iter().enumerate() {
                prop_assert!((v - 1.0 / (1.0 + horizon - opt.t[j])).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn cost_scales_linearly(c in 0.1..10.0f64, u in 0.1..2.0f64) {
        let m = model(0.05, 0.2, -0.5, 0.3, 1.0);
        let paths = build_paths(&TimeGrid::uniform(1.0, 10).unwrap(), &m.intensity, 11, 100).unwrap();
        let ctl = ControlProcess::constant(u, nonneg());
        let problem = m.problem(u);
        let j = estimate_j(&problem, &ctl, &paths).unwrap().estimate.mean;
        let js = estimate_j(&problem.scaled(c), &ctl, &paths).unwrap().estimate.mean;
        prop_assert!((js - c * j).abs() <= 1e-12 * (c * j).abs().max(1.0));
    }

    #[test]
    fn projection_fixes_its_span(cols in prop::collection::vec(prop::collection::vec(-3.0..3.0f64, 30), 1..5), coef in prop::collection::vec(-2.0..2.0f64, 5)) {
        let target: Vec<f64> = (0..30).map(|i| cols.iter().zip(&coef).map(|(c, a)| a * c[i]).sum()).collect();
        let proj = Projection::new(cols.clone());
        let fitted = proj.project(&target);
        let scale = target.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        for (f, t) in fitted.iter().zip(&target) {
            prop_assert!((f - t).abs() <= 1e-9 * scale);
        }
        // idempotent
        let again = proj.project(&fitted);
        for (a, f) in again.iter().zip(&fitted) {
            prop_assert!((a - f).abs() <= 1e-9 * scale);
        }
    }
}
