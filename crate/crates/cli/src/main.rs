//! `smpdefault` command line: runs one experiment from a TOML config and
//! writes a JSON report plus CSV data into the output directory.
//!
//! Exit codes: 0 when every check passes, 1 on a failed check or numerical
//! failure (the report is still written), 2 on a bad config or arguments.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use smpdefault::acceptance::{c14_reproducibility, run_criterion, SuiteConfig};
use smpdefault::bsde::{
    bsde_residual_by_knot, contraction_diagnostic, simulate_gamma, solve_linear_explicit, solve_regression_backward, BsdeSolution, GeneralBsdeSpec,
    LinearBsdeSpec,
};
use smpdefault::config::{BsdeRun, ControlSpec, ExperimentConfig};
use smpdefault::logutility::{adjoint_closed_form_check, certify_optimality, closed_form_pi_hat, write_curve_csv, CertifyConfig, OptimalControlPath};
use smpdefault::paths::{quadratic_variation_check, write_paths_csv, FiltrationPath};
use smpdefault::regression::{BasisFn, RegressionBasis};
use smpdefault::report::{write_timing, Check, RunReport};
use smpdefault::sde::{euler_simulate_form, picard_solve, write_sde_csv, ContractionReport, ControlProcess, NoiseForm, PicardConfig};
use smpdefault::smp::{
    adjoint_general_spec, assemble_adjoint, check_sufficient, directional_derivative, estimate_j, ControlProblem, SufficientConfig,
};
use smpdefault::{Error, Estimate, Interval};

#[derive(Parser)]
#[command(
    name = "smpdefault",
    version,
    about = "Controlled SDEs with a default time, adjoint BSDEs and maximum principle checks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate filtration paths and the controlled wealth SDE.
    SimulateSde(Common),
    /// Solve the adjoint or a linear BSDE by both solvers.
    SolveBsde(Common),
    /// Sufficient-condition check and equivalence principle for `run.control`.
    VerifySmp(Common),
    /// Finite-difference vs Hamiltonian directional derivatives.
    DirectionalDerivative(Common),
    /// Closed-form optimal control of the log-utility problem, with checks.
    LogUtility(Common),
    /// Run the acceptance suite.
    Selftest {
        #[command(flatten)]
        common: Common,
        /// Ten times fewer Monte Carlo paths.
        #[arg(long)]
        quick: bool,
    },
}

#[derive(Args, Clone)]
struct Common {
    /// TOML config; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `numerics.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `output.dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides `numerics.n_paths`.
    #[arg(long)]
    paths: Option<usize>,
    /// Overrides `numerics.n_steps`.
    #[arg(long)]
    steps: Option<usize>,
}

impl Common {
    fn load(&self) -> smpdefault::Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.numerics.seed = s;
        }
        if let Some(d) = &self.out {
            cfg.output.dir = d.clone();
        }
        if let Some(n) = self.paths {
            cfg.numerics.n_paths = n;
        }
        if let Some(n) = self.steps {
            cfg.numerics.n_steps = n;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (name, common, quick) = match &cli.command {
        Command::SimulateSde(c) => ("simulate-sde", c, false),
        Command::SolveBsde(c) => ("solve-bsde", c, false),
        Command::VerifySmp(c) => ("verify-smp", c, false),
        Command::DirectionalDerivative(c) => ("directional-derivative", c, false),
        Command::LogUtility(c) => ("log-utility", c, false),
        Command::Selftest { common, quick } => ("selftest", common, *quick),
    };
    let cfg = match common.load() {
        Ok(c) => c,
        Err(e) => {
            eprintln!("smpdefault: {e}");
            return ExitCode::from(2);
        }
    };
    let start = Instant::now();
    let out = cfg.output.dir.clone();
    let mut report = RunReport::new(name, &cfg);
    let result = match name {
        "simulate-sde" => simulate_sde(&cfg, &mut report),
        "solve-bsde" => solve_bsde(&cfg, &mut report),
        "verify-smp" => verify_smp(&cfg, &mut report),
        "directional-derivative" => directional(&cfg, &mut report),
        "log-utility" => log_utility(&cfg, &mut report),
        _ => selftest(&cfg, quick, &mut report),
    };
    if let Err(e) = &result {
        eprintln!("smpdefault {name}: {e}");
        report.checks.push(Check::new("run completed", false));
        report.details = json!({"error": e.to_string(), "partial": report.details});
    }
    for c in &report.checks {
        println!("{} {}", if c.pass() { "PASS" } else { "FAIL" }, c.name);
    }
    let written = report
        .write(&out, &format!("{name}.json"))
        .and_then(|p| write_timing(&out, name, start.elapsed().as_secs_f64()).map(|_| p));
    match written {
        Ok(p) => println!("report: {}", p.display()),
        Err(e) => {
            eprintln!("smpdefault: cannot write report: {e}");
            return ExitCode::from(1);
        }
    }
    if result.is_ok() && report.all_pass() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    }
}

fn csv_out(dir: &Path, name: &str) -> smpdefault::Result<BufWriter<File>> {
    std::fs::create_dir_all(dir)?;
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

/// Control named by `run.control`, its bound, and `pi_hat` when it was needed.
type Resolved = (ControlProcess<f64>, f64, Option<OptimalControlPath<f64>>);

fn resolve_control(cfg: &ExperimentConfig, paths: &[FiltrationPath<f64>]) -> smpdefault::Result<Resolved> {
    let model = cfg.wealth_model();
    match cfg.run.control {
        ControlSpec::Constant { value } => Ok((ControlProcess::constant(value, Interval::new(0.0, f64::INFINITY)), value, None)),
        ControlSpec::PiHat => {
            let opt = closed_form_pi_hat(&model, paths)?;
            Ok((opt.control(), opt.max_pi(), Some(opt)))
        }
        ControlSpec::ScaledPiHat { factor } => {
            let opt = closed_form_pi_hat(&model, paths)?;
            Ok((opt.scaled_control(factor), opt.max_pi() * factor, Some(opt)))
        }
    }
}

type Experiment = (Vec<FiltrationPath<f64>>, ControlProcess<f64>, ControlProblem<f64>);

fn setup(cfg: &ExperimentConfig) -> smpdefault::Result<Experiment> {
    let paths = cfg.paths()?;
    let (control, bound, _) = resolve_control(cfg, &paths)?;
    let problem = cfg.wealth_model().problem(bound);
    Ok((paths, control, problem))
}

fn simulate_sde(cfg: &ExperimentConfig, report: &mut RunReport) -> smpdefault::Result<()> {
    let (paths, control, problem) = setup(cfg)?;
    let states = problem.forward_all(&control, &paths)?;
    let keep = cfg.run.csv_paths.min(paths.len());
    write_paths_csv(csv_out(&cfg.output.dir, "paths.csv")?, &paths[..keep])?;
    write_sde_csv(csv_out(&cfg.output.dir, "sde.csv")?, &paths[..keep], &states[..keep])?;

    let qv = paths.iter().all(quadratic_variation_check);
    report.checks.push(Check::new("covariation [M] = H on every path", qv));
    let mut form_diff = 0.0f64;
    for (i, p) in paths.iter().enumerate() {
        let a = euler_simulate_form(&problem.coeffs, &control, p, i, cfg.model.x0, NoiseForm::Indicator)?;
        let b = euler_simulate_form(&problem.coeffs, &control, p, i, cfg.model.x0, NoiseForm::Martingale)?;
        form_diff = a.x.iter().zip(&b.x).map(|(x, y)| (x - y).abs()).fold(form_diff, f64::max);
    }
    report.checks.push(
        Check::new("dH and dM Euler forms agree", form_diff <= 1e-12)
            .with_value(form_diff)
            .with_tolerance(1e-12),
    );
    let tol = &cfg.numerics.tolerances;
    let sub = &paths[..paths.len().min(200)];
    let pc = PicardConfig::from_lipschitz(problem.coeffs.lipschitz_const, tol.picard, tol.picard_max_iter);
    let picard = match picard_solve(&problem.coeffs, &control, sub, cfg.model.x0, &pc) {
        Ok((_, rep)) => rep,
        Err(Error::NonConvergence { norms, .. }) => ContractionReport {
            beta_weight: pc.beta_weight,
            ratios: norms.windows(2).map(|w| w[1] / w[0]).collect(),
            norms,
            iterations: 0,
        },
        Err(e) => return Err(e),
    };
    let contracts = picard.norms.len() >= 2 && picard.norms.windows(2).all(|w| w[1] < w[0]) && *picard.norms.last().unwrap_or(&1.0) <= tol.picard;
    report
        .checks
        .push(Check::new("Picard differences decrease to tolerance", contracts).with_tolerance(tol.picard));
    if cfg.model.mu > -1.0 {
        let positive = states.iter().all(|s| s.x.iter().all(|&x| x > 0.0));
        report.checks.push(Check::new("wealth stays positive", positive));
    }
    let n = paths[0].grid.n_steps();
    let terminal: Vec<f64> = states.iter().map(|s| s.terminal()).collect();
    let defaulted = paths.iter().filter(|p| p.defaulted()).count();
    let mean_m: Vec<Estimate> = (0..=n)
        .map(|j| Estimate::from_samples(&paths.iter().map(|p| p.m[p.grid.base_index()[j]]).collect::<Vec<_>>()))
        .collect();
    report.details = json!({
        "paths": paths.len(),
        "defaulted": defaulted,
        "terminal_x": Estimate::from_samples(&terminal),
        "mean_m_by_knot": mean_m,
        "max_form_diff": form_diff,
        "picard": picard,
        "clamp_events": states.iter().map(|s| s.clamp_events).sum::<usize>(),
    });
    Ok(())
}

/// Standard error of a `Y_0` estimate, taken as the spread of `Y_1` across paths.
fn y0_se(sol: &BsdeSolution<f64>) -> f64 {
    Estimate::from_samples(&sol.y[1]).se
}

/// Explicit solution, the same equation as a general spec, the regression
/// basis, and a sampling SE for `p_0` when one is available in closed form.
struct BsdeSetup {
    explicit: BsdeSolution<f64>,
    general: GeneralBsdeSpec<f64>,
    basis: RegressionBasis,
    se: Option<f64>,
}

fn bsde_setup(cfg: &ExperimentConfig, paths: &[FiltrationPath<f64>]) -> smpdefault::Result<BsdeSetup> {
    let basis = cfg.basis();
    match cfg.run.bsde {
        BsdeRun::Adjoint => {
            let model = cfg.wealth_model();
            let (control, bound, _) = resolve_control(cfg, paths)?;
            let problem = model.problem(bound);
            let basis = model.basis(&basis);
            let forwards = Arc::new(problem.forward_all(&control, paths)?);
            let spec = assemble_adjoint(&problem, forwards.clone());
            Ok(BsdeSetup {
                explicit: solve_linear_explicit(&spec, paths, &basis)?,
                general: adjoint_general_spec(&problem, forwards),
                // the adjoint is a function of the wealth, so the regression sees it
                basis: basis.with(BasisFn::State).with(BasisFn::InvState),
                se: None,
            })
        }
        BsdeRun::Linear {
            phi,
            alpha,
            pi,
            mu,
            beta,
            terminal_const,
            terminal_w,
        } => {
            let spec = LinearBsdeSpec::constant(phi, alpha, pi, mu, beta, 0.0)
                .with_terminal(move |p, _| terminal_const + terminal_w * p.w.last().copied().unwrap_or(0.0));
            let lam = cfg.intensity().bound_c;
            let lipschitz = (alpha - pi).abs() + 2.0 * lam * mu.abs() + beta.abs();
            let payoff: Vec<f64> = paths
                .iter()
                .enumerate()
                .map(|(i, p)| {
                    let g = simulate_gamma(&spec, p, i)?.base;
                    let n = p.grid.n_steps();
                    let run: f64 = (0..n).map(|j| g[j + 1] * phi * p.grid.base_dt(j)).sum();
                    Ok(g[n] * (spec.terminal)(p, i) + run)
                })
                .collect::<smpdefault::Result<_>>()?;
            Ok(BsdeSetup {
                explicit: solve_linear_explicit(&spec, paths, &basis)?,
                general: spec.to_general(lipschitz),
                basis,
                se: Some(Estimate::from_samples(&payoff).se),
            })
        }
    }
}

fn solve_bsde(cfg: &ExperimentConfig, report: &mut RunReport) -> smpdefault::Result<()> {
    let paths = cfg.paths()?;
    let BsdeSetup {
        explicit,
        general,
        basis,
        se,
    } = bsde_setup(cfg, &paths)?;
    let regression = solve_regression_backward(&general, &paths, &basis)?;
    // The two solvers discretize time differently. Their gap on the same
    // noise at half the steps estimates the O(dt) part of the difference.
    let diff = regression.y0() - explicit.y0();
    let truncation = if cfg.numerics.n_steps.is_multiple_of(2) && cfg.numerics.n_steps >= 4 {
        let intensity = cfg.intensity();
        let coarse: Vec<FiltrationPath<f64>> = paths.iter().map(|p| p.coarsen(2, &intensity)).collect::<smpdefault::Result<_>>()?;
        let c = bsde_setup(cfg, &coarse)?;
        let coarse_diff = solve_regression_backward(&c.general, &coarse, &c.basis)?.y0() - c.explicit.y0();
        (diff - coarse_diff).abs()
    } else {
        0.0
    };
    let residual = bsde_residual_by_knot(&regression, &general, &paths)?;
    regression.write_csv(csv_out(&cfg.output.dir, "bsde_regression.csv")?, &residual)?;
    let explicit_residual = bsde_residual_by_knot(&explicit, &general, &paths)?;
    explicit.write_csv(csv_out(&cfg.output.dir, "bsde_explicit.csv")?, &explicit_residual)?;

    let se = se.unwrap_or_else(|| y0_se(&explicit));
    let combined = se * std::f64::consts::SQRT_2;
    let tolerance = 3.0 * combined + truncation;
    report.checks.push(
        Check::new("regression Y_0 matches explicit p_0", diff.abs() <= tolerance)
            .with_value(diff)
            .with_tolerance(tolerance),
    );
    let finite = residual.iter().all(|r| r.is_finite());
    report.checks.push(Check::new("residual finite at every knot", finite));
    let tol = &cfg.numerics.tolerances;
    let contraction = contraction_diagnostic(&general, &paths, &basis, tol.contraction_max_iter, tol.contraction)?;
    report.checks.push(Check::new("contraction ratios below one", contraction.geometric(3)));
    report.details = json!({
        "explicit_y0": explicit.y0(),
        "regression_y0": regression.y0(),
        "y0_se": se,
        "truncation": truncation,
        "residual_by_knot": residual,
        "explicit_residual_by_knot": explicit_residual,
        "regression_diagnostics": regression.diagnostics,
        "contraction": contraction,
    });
    Ok(())
}

fn verify_smp(cfg: &ExperimentConfig, report: &mut RunReport) -> smpdefault::Result<()> {
    let (paths, control, problem) = setup(cfg)?;
    let basis = cfg.wealth_model().basis(&cfg.basis());
    let j = estimate_j(&problem, &control, &paths)?;
    let scfg = SufficientConfig {
        concavity_tol: cfg.numerics.tolerances.concavity,
        ..SufficientConfig::default()
    };
    let suff = check_sufficient(
        &problem,
        &control,
        &paths,
        &basis,
        Interval::new(cfg.run.search_lo, cfg.run.search_hi),
        &scfg,
    )?;
    report.checks.push(
        Check::new("Hamiltonian concave in (x, u)", suff.hamiltonian_concave)
            .with_value(suff.max_hessian_eigen_ratio)
            .with_tolerance(suff.concavity_tol),
    );
    report
        .checks
        .push(Check::new("terminal cost concave", suff.terminal_concave).with_value(suff.max_terminal_second_diff));
    report
        .checks
        .push(Check::new("variational inequality E[dH/du (v - u)] <= 0", suff.first_order_ok).with_value(suff.worst_excess));
    let mut rows = Vec::new();
    for (k, d) in cfg.run.directions.iter().enumerate() {
        let r = directional_derivative(&problem, &control, &d.rule(), &paths, &basis, cfg.numerics.fd_step)?;
        report.checks.push(
            Check::new(format!("direction {k}: finite difference agrees with Hamiltonian"), r.agree)
                .with_estimate(r.difference)
                .with_tolerance(r.tolerance + r.truncation),
        );
        rows.push(json!({"direction": d, "report": r}));
    }
    report.details = json!({"j": j.estimate, "sufficient": suff, "directional": rows});
    Ok(())
}

fn directional(cfg: &ExperimentConfig, report: &mut RunReport) -> smpdefault::Result<()> {
    let (paths, control, problem) = setup(cfg)?;
    let basis = cfg.wealth_model().basis(&cfg.basis());
    let mut rows = Vec::new();
    for (k, d) in cfg.run.directions.iter().enumerate() {
        let r = directional_derivative(&problem, &control, &d.rule(), &paths, &basis, cfg.numerics.fd_step)?;
        report.checks.push(
            Check::new(format!("direction {k}: finite difference agrees with Hamiltonian"), r.agree)
                .with_estimate(r.fd)
                .with_tolerance(r.tolerance + r.truncation),
        );
        rows.push(json!({
            "direction": d,
            "fd_vanishes": r.fd_vanishes(),
            "hamiltonian_vanishes": r.hamiltonian_vanishes(),
            "nonzero_same_sign": r.nonzero_same_sign(),
            "report": r,
        }));
    }
    report.details = json!({"directional": rows});
    Ok(())
}

fn log_utility(cfg: &ExperimentConfig, report: &mut RunReport) -> smpdefault::Result<()> {
    let model = cfg.wealth_model();
    let paths = cfg.paths()?;
    let basis = cfg.basis();
    let opt = closed_form_pi_hat(&model, &paths)?;
    write_curve_csv(csv_out(&cfg.output.dir, "pi_hat_curve.csv")?, &opt)?;
    let curve = opt.mean_curve();
    let adjoint = adjoint_closed_form_check(&model, &paths, &basis)?;
    report
        .checks
        .push(Check::new("adjoint p S = E[theta + T - t | G_t]", adjoint.pass).with_value(adjoint.max_abs_diff));
    let ccfg = CertifyConfig {
        deltas: cfg.run.deltas.clone(),
        fd_step: cfg.numerics.fd_step,
        search: Interval::new(cfg.run.search_lo, cfg.run.search_hi),
        sufficient: SufficientConfig {
            concavity_tol: cfg.numerics.tolerances.concavity,
            ..SufficientConfig::default()
        },
    };
    let cert = certify_optimality(&model, &paths, &basis, &ccfg)?;
    report
        .checks
        .push(Check::new("J(pi_hat) >= J(pi_hat (1 + delta)) on the sweep", cert.sweep_max_at_pi_hat));
    report
        .checks
        .push(Check::new("directional derivative at pi_hat vanishes", cert.derivative_vanishes).with_estimate(cert.derivative.fd));
    report
        .checks
        .push(Check::new("sufficient conditions hold at pi_hat", cert.sufficient.pass));
    report.details = json!({
        "pi_hat_t0": curve[0],
        "pi_hat_curve": opt.t.iter().zip(&curve).map(|(t, p)| json!({"t": t, "pi_hat": p})).collect::<Vec<_>>(),
        "adjoint_check": adjoint,
        "certify": cert,
    });
    Ok(())
}

fn selftest(cfg: &ExperimentConfig, quick: bool, report: &mut RunReport) -> smpdefault::Result<()> {
    let scfg = SuiteConfig {
        seed: cfg.numerics.seed,
        quick: quick || cfg.run.quick,
    };
    let mut results = Vec::new();
    for id in 1..=13 {
        let r = run_criterion(id, &scfg);
        println!("{}", r.line());
        results.push(r);
    }
    let c14 = c14_reproducibility(&scfg, &results);
    println!("{}", c14.line());
    results.push(c14);
    for r in &results {
        report.checks.push(Check::new(format!("criterion {:02}: {}", r.id, r.name), r.pass));
    }
    report.details = json!({"quick": scfg.quick, "criteria": results});
    if results.iter().any(|r| r.details.is_null()) {
        return Err(Error::InvalidInput("a criterion stopped with an error".into()));
    }
    Ok(())
}
