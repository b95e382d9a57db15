//! One run: solve the particle system, then execute each requested check.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::Instant;

use mfc_lab::ensemble::{brownian_lattice_with, h_inner, wasserstein2_1d, wasserstein2_exact_small, ParticleEnsemble, PathLattice};
use mfc_lab::error::Error;
use mfc_lab::fbsde::{
    energy_identity, lambda_t_for, lq_payoff, monotonicity_check, random_adapted_control, second_derivative_quadratic_form, solve_lq_derivative,
    FBSolution, Problem,
};
use mfc_lab::functionals::{
    bilinear_b, fd_gateaux_grad, gamma_action, grad_f, second_order_taylor_residual, validate_bounds, Functional, FunctionalKind,
};
use mfc_lab::hjbfp::{self, Grid1D, Mixture};
use mfc_lab::riccati::LqRiccati;
use mfc_lab::value::{
    bellman_residual, dpp_check, gradient_fd_check, master_residual, solve_value, terminal_value, MasterDirections, ValueConfig, ValueReport,
};

use crate::config::{steps_of, CheckConfig, InitialConfig, LoadedConfig, RunConfig};
use crate::report::{CheckOutcome, Failure, Meta, RunReport, SolverSection, Status, ValueSection, SCHEMA_VERSION};

/// Stable per-purpose seeds derived from the run seed (splitmix64 finalizer).
fn sub_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

const TAG_PROBE: u64 = 1;
const TAG_FD: u64 = 2;
const TAG_CORR: u64 = 3;
const TAG_RICCATI: u64 = 4;
const TAG_MONO: u64 = 5;
const TAG_W2: u64 = 6;
const TAG_MIX: u64 = 7;
const TAG_BOUNDS: u64 = 8;

/// Side tables produced alongside the report.
#[derive(Debug, Default)]
pub struct SideTables {
    /// (file suffix, csv text)
    pub tables: Vec<(String, String)>,
}

pub struct RunOutput {
    pub report: RunReport,
    pub side: SideTables,
}

struct Ctx<'a> {
    cfg: &'a RunConfig,
    problem: &'a Problem,
    x: &'a ParticleEnsemble,
    lattice: &'a PathLattice,
    vcfg: ValueConfig,
    rep: &'a ValueReport,
    sol: &'a FBSolution,
    mixture: Option<&'a Mixture>,
    seed: u64,
}

fn failure(stage: &str, e: &Error) -> Failure {
    Failure { stage: stage.into(), kind: e.kind().into(), message: e.to_string() }
}

/// Run a prepared config. Config errors are reported by the caller before this point.
pub fn execute(loaded: &LoadedConfig, prepared: crate::config::Prepared) -> RunOutput {
    let cfg = &loaded.config;
    let name = cfg.name.clone().unwrap_or_else(|| loaded.stem.clone());
    let mut timings = BTreeMap::new();
    let meta = |timings: BTreeMap<String, f64>| Meta {
        mfc_lab_version: mfc_lab::VERSION.into(),
        cli_version: env!("CARGO_PKG_VERSION").into(),
        lattice: cfg.discretization.lattice,
        timings_ms: timings,
    };
    let crate::config::Prepared { problem, x, time } = prepared;
    let lambda_t = lambda_t_for(&problem, time);
    let seed = cfg.discretization.seed;
    let mut report = RunReport {
        schema_version: SCHEMA_VERSION,
        name,
        config: cfg.clone(),
        lambda_t: lambda_t.is_finite().then_some(lambda_t),
        status: Status::Passed,
        solver: SolverSection::default(),
        value: None,
        checks: vec![],
        meta: meta(BTreeMap::new()),
    };
    let mut side = SideTables::default();

    let mixture = match cfg.checks.iter().find(|c| matches!(c, CheckConfig::HjbfpCompare { .. })) {
        Some(CheckConfig::HjbfpCompare { mixture_eps, .. }) => {
            let (mean, std) = gaussian_params(cfg);
            let other = ParticleEnsemble::gaussian_matched(x.n_particles(), 1, mean + std, 0.5 * std, sub_seed(seed, TAG_MIX));
            match hjbfp::mixture(&x, &other, *mixture_eps, sub_seed(seed, TAG_MIX + 100)) {
                Ok(m) => Some(m),
                Err(e) => return solver_failed(report, side, "hjbfp_compare", &e, meta(timings)),
            }
        }
        _ => None,
    };
    let mut anchors: Vec<&ParticleEnsemble> = vec![&x];
    if let Some(m) = &mixture {
        anchors.push(&m.mixed);
    }
    let t0 = Instant::now();
    let lattice = match brownian_lattice_with(time, x.n_particles(), problem.spec.dim, seed, cfg.discretization.lattice, &anchors) {
        Ok(l) => l,
        Err(e) => return solver_failed(report, side, "lattice", &e, meta(timings)),
    };
    let vcfg = ValueConfig { picard: cfg.solver, probe_seed: sub_seed(seed, TAG_PROBE), with_probe: false };
    let (rep, sol) = match solve_value(&problem, &x, &lattice, &vcfg) {
        Ok(r) => r,
        Err(e) => {
            timings.insert("solve".into(), ms(t0));
            return solver_failed(report, side, "solve", &e, meta(timings));
        }
    };
    timings.insert("solve".into(), ms(t0));
    report.solver = SolverSection { iterations: rep.iterations, final_gap: rep.final_gap, failure: None };
    report.value = Some(ValueSection {
        value: rep.value,
        standard_error: rep.standard_error,
        gradient_norm: rep.gradient.norm(),
        x_norm2: x.norm().powi(2),
    });
    let ctx = Ctx { cfg, problem: &problem, x: &x, lattice: &lattice, vcfg, rep: &rep, sol: &sol, mixture: mixture.as_ref(), seed };
    for check in &cfg.checks {
        let t = Instant::now();
        let out = run_check(&ctx, check, &mut side);
        timings.insert(check.name().into(), ms(t));
        match out {
            Ok(o) => {
                if !o.passed && report.status == Status::Passed {
                    report.status = Status::CheckFailed;
                }
                report.checks.push(o);
            }
            Err(e) => {
                report.status = Status::SolverFailed;
                report.solver.failure = Some(failure(check.name(), &e));
                let mut o = CheckOutcome::new(check.name());
                o.fail(format!("{}: {e}", e.kind()));
                report.checks.push(o);
            }
        }
    }
    let residuals = crate::report::residual_table(&report);
    if report.checks.iter().any(|c| !c.residuals.is_empty()) {
        side.tables.push(("residuals.csv".into(), residuals));
    }
    report.meta = meta(timings);
    RunOutput { report, side }
}

fn solver_failed(mut report: RunReport, side: SideTables, stage: &str, e: &Error, meta: Meta) -> RunOutput {
    report.status = Status::SolverFailed;
    report.solver.failure = Some(failure(stage, e));
    report.meta = meta;
    RunOutput { report, side }
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

fn gaussian_params(cfg: &RunConfig) -> (f64, f64) {
    match cfg.initial {
        InitialConfig::Gaussian { mean, std, .. } => (mean, std),
        InitialConfig::Csv { .. } => (0.0, 1.0),
    }
}

fn scale(x: &ParticleEnsemble) -> f64 {
    1.0 + x.norm().powi(2)
}

fn rel(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
    }
}

fn run_check(c: &Ctx, check: &CheckConfig, side: &mut SideTables) -> Result<CheckOutcome, Error> {
    let mut o = CheckOutcome::new(check.name());
    let time = c.lattice.grid;
    match check {
        CheckConfig::GradientFd { step, n_random, tol } => {
            let err = gradient_fd_check(c.problem, c.x, c.lattice, &c.vcfg, *step, *n_random, sub_seed(c.seed, TAG_FD))?;
            o.at_most("relative_error", err, *tol);
        }
        CheckConfig::Dpp { h, tol } => {
            let m = steps_of(*h, &time).ok_or_else(|| Error::InvalidArgument("h is not a multiple of dt".into()))?;
            let r = dpp_check(c.problem, c.x, c.lattice, &c.vcfg, m)?;
            o.at_most("residual", r.residual, tol * scale(c.x));
            o.residuals.push(r);
        }
        CheckConfig::Bellman { steps, tol, min_rate } => {
            let r = bellman_residual(c.problem, c.x, c.lattice, &c.vcfg, steps)?;
            o.at_most("residual", r.residual, tol * scale(c.x));
            let vanishing = r.samples.iter().all(|s| s.residual <= VANISHING_RESIDUAL * scale(c.x));
            match r.rate_estimate {
                Some(rate) if !vanishing => o.at_least("rate", rate, *min_rate),
                None if steps.len() >= 3 && !vanishing => o.fail("rate could not be fitted"),
                _ if vanishing => o.notes.push("residuals vanish; no rate to fit".into()),
                _ => {}
            }
            o.residuals.push(r);
        }
        CheckConfig::Master { steps, n_directions, tol, terminal_tol } => {
            let dirs = MasterDirections::spread(c.x.n_particles(), *n_directions);
            let r = master_residual(c.problem, c.x, c.lattice, &c.vcfg, *steps, &dirs)?;
            o.at_most("residual", r.residual, *tol);
            o.residuals.push(r);
            let term = terminal_value(c.problem, c.x)?;
            let gap = term.gradient.sub(&grad_f(&c.problem.terminal, c.x)?)?.norm();
            o.at_most("terminal_identity", gap, *terminal_tol);
        }
        CheckConfig::Correspondence { n_triples, symmetry_tol, grad_tol, taylor_tol, gamma_tol } => {
            for (role, f) in [("running", &c.problem.running), ("terminal", &c.problem.terminal)] {
                correspondence(&mut o, role, f, *n_triples, sub_seed(c.seed, TAG_CORR), [*symmetry_tol, *grad_tol, *taylor_tol, *gamma_tol])?;
            }
        }
        CheckConfig::Riccati { n_directions, value_tol, gradient_tol, second_tol } => {
            let w = c.cfg.lq_weight().expect("validated LQ problem");
            let spec = &c.problem.spec;
            let r = LqRiccati { lambda: spec.lambda, terminal_weight: w, sigma: c.cfg.sigma_scalar().unwrap_or(0.0), dim: spec.dim, t_end: time.t_end };
            let t = time.t_start;
            let xn2 = c.x.norm().powi(2);
            o.at_most("value_relative", rel(c.rep.value, r.value(t, xn2)), *value_tol);
            let target = c.x.scaled(r.p(t));
            o.at_most("gradient_relative", c.rep.gradient.sub(&target)?.norm() / target.norm().max(f64::MIN_POSITIVE), *gradient_tol);
            let mut worst_q: f64 = 0.0;
            let mut worst_payoff: f64 = 0.0;
            for k in 0..*n_directions {
                let dir = ParticleEnsemble::gaussian(c.x.n_particles(), spec.dim, 0.0, 1.0, sub_seed(c.seed, TAG_RICCATI + 16 * k as u64));
                let half_q = second_derivative_quadratic_form(c.sol, c.problem, &dir, &c.vcfg.picard)?;
                worst_q = worst_q.max(rel(2.0 * half_q, r.p(t) * dir.norm().powi(2)));
                let paths = solve_lq_derivative(c.sol, c.problem, &dir, &c.vcfg.picard)?;
                worst_payoff = worst_payoff.max(rel(half_q, lq_payoff(c.sol, c.problem, &paths)?));
            }
            o.at_most("second_derivative_relative", worst_q, *second_tol);
            o.at_most("payoff_relative", worst_payoff, *second_tol);
        }
        CheckConfig::Monotonicity { n_pairs, tol } => {
            let reg = c.vcfg.picard.regression;
            let mut worst = f64::INFINITY;
            for k in 0..*n_pairs as u64 {
                let s = sub_seed(c.seed, TAG_MONO + 16 * k);
                let v1 = random_adapted_control(c.x, c.lattice, 1, 1.0, s)?;
                let v2 = random_adapted_control(c.x, c.lattice, 1, 1.0, s ^ 1)?;
                worst = worst.min(monotonicity_check(c.problem, c.x, &v1, &v2, c.lattice, &reg)?);
            }
            o.at_least("margin", worst, -tol);
            o.record("lambda_t_discrete", c.problem.lambda_t_on(c.lattice));
        }
        CheckConfig::EnergyIdentity { tol } => {
            let (lhs, rhs) = energy_identity(c.sol, c.problem)?;
            o.record("lhs", lhs);
            o.record("rhs", rhs);
            o.at_most("gap", (lhs - rhs).abs(), tol * scale(c.x));
            if !c.problem.spec.is_noiseless() {
                o.notes.push("with noise the identity omits the quadratic-variation term".into());
            }
        }
        CheckConfig::Wasserstein { n_pairs, max_atoms, tol } => wasserstein(&mut o, *n_pairs, *max_atoms, *tol, sub_seed(c.seed, TAG_W2))?,
        CheckConfig::HjbfpCompare {
            nx,
            n_steps,
            width,
            bulk_std,
            fixed_point,
            riccati_tol,
            value_tol,
            gradient_tol,
            weak_tol,
            mass_tol,
            ..
        } => {
            let (mean, std) = gaussian_params(c.cfg);
            let a = c.problem.spec.diffusion()[0];
            let spread = (std * std + a * time.horizon()).sqrt();
            let grid = Grid1D::padded(mean, spread, *width, *nx)?;
            let gtime = mfc_lab::ensemble::TimeGrid::new(time.t_start, time.t_end, *n_steps)?;
            let m0 = hjbfp::gaussian_density(&grid, mean, std * std)?;
            let gp = Problem::new(c.problem.running.clone(), c.problem.terminal.clone(), c.problem.spec.with_horizon(gtime))?;
            let gsol = hjbfp::fixed_point(&gp, &m0, grid, gtime, fixed_point)?;
            o.record("grid_iterations", gsol.iterations as f64);
            if let Some(w) = c.cfg.lq_weight() {
                let r = LqRiccati { lambda: gp.spec.lambda, terminal_weight: w, sigma: c.cfg.sigma_scalar().unwrap_or(0.0), dim: 1, t_end: time.t_end };
                let worst = grid.interior().map(|i| (gsol.u.values[0][i] - r.potential(grid.x(i), time.t_start)).abs()).fold(0.0, f64::max);
                o.at_most("grid_riccati_sup", worst, *riccati_tol);
            }
            let cv = hjbfp::cross_validate(c.problem, c.x, c.lattice, &c.vcfg, &gsol, c.mixture, bulk_std * std)?;
            o.at_most("gradient_gap", cv.gradient_gap, *gradient_tol);
            o.record("bulk_particles", cv.bulk_particles as f64);
            o.record("value_particle", cv.value_particle);
            o.record("value_grid", cv.value_grid);
            o.at_most("value_gap", cv.value_gap, *value_tol);
            o.record("weak_derivative_particle", cv.weak_derivative_particle);
            o.record("weak_derivative_grid", cv.weak_derivative_grid);
            o.at_most("weak_derivative_gap", cv.weak_derivative_gap, *weak_tol);
            o.at_most("mass_drift", gsol.m.max_mass_drift(), *mass_tol);
            o.at_least("min_density", gsol.m.min_value(), -hjbfp::NEGATIVE_DENSITY_TOL);
            let mut buf = Vec::new();
            hjbfp::write_fields_csv(&gsol, &mut buf)?;
            side.tables.push(("fields.csv".into(), String::from_utf8(buf).expect("utf-8 csv")));
        }
        CheckConfig::BoundsValidation { n_trials } => {
            for (role, f) in [("running", &c.problem.running), ("terminal", &c.problem.terminal)] {
                let b = validate_bounds(f, &c.problem.spec, &f.regularity(), *n_trials, sub_seed(c.seed, TAG_BOUNDS))?;
                o.record(&format!("{role}_lipschitz_ratio"), b.lipschitz_ratio);
                o.record(&format!("{role}_growth_ratio"), b.growth_ratio);
                o.record(&format!("{role}_quasi_convexity_ratio"), b.quasi_convexity_ratio);
                o.record(&format!("{role}_holder_ratio"), b.holder_ratio);
                for v in b.violations {
                    o.fail(format!("{role}: {v}"));
                }
            }
        }
    }
    Ok(o)
}

/// Residuals at round-off level carry no rate information.
const VANISHING_RESIDUAL: f64 = 1e-13;

const CORRESPONDENCE_PARTICLES: usize = 256;

fn correspondence(o: &mut CheckOutcome, role: &str, f: &Functional, n_triples: usize, seed: u64, tol: [f64; 4]) -> Result<(), Error> {
    let [sym_tol, grad_tol, taylor_tol, gamma_tol] = tol;
    let (n, d) = (CORRESPONDENCE_PARTICLES, f.dim);
    let ens = |k: u64, mean: f64| ParticleEnsemble::gaussian(n, d, mean, 1.0, seed.wrapping_add(k));
    let mut sym: f64 = 0.0;
    let mut gamma: f64 = 0.0;
    let mut grad: f64 = 0.0;
    let mut taylor: f64 = 0.0;
    let quadratic = matches!(f.kind, FunctionalKind::Quadratic { .. } | FunctionalKind::Zero);
    for t in 0..n_triples as u64 {
        let (x, z, y) = (ens(3 * t, 0.2), ens(3 * t + 1, 0.0), ens(3 * t + 2, 0.0));
        let bzy = bilinear_b(f, &x, &z, &y)?;
        let byz = bilinear_b(f, &x, &y, &z)?;
        sym = sym.max((bzy - byz).abs() / (1.0 + bzy.abs()));
        let gzy = h_inner(&gamma_action(f, &x, &z)?, &y)?;
        gamma = gamma.max((gzy - bzy).abs() / (1.0 + bzy.abs()));
        if t < 8 {
            let g = grad_f(f, &x)?;
            let fd = fd_gateaux_grad(f, &x, 1e-4 * (1.0 + x.norm()))?;
            grad = grad.max(fd.sub(&g)?.norm() / (1.0 + g.norm()));
            if quadratic {
                taylor = taylor.max(second_order_taylor_residual(f, &x, &y, 0.1)?);
            }
        }
    }
    o.at_most(&format!("{role}_symmetry"), sym, sym_tol);
    o.at_most(&format!("{role}_gamma_consistency"), gamma, gamma_tol);
    o.at_most(&format!("{role}_grad_vs_fd"), grad, grad_tol);
    if quadratic {
        o.at_most(&format!("{role}_taylor_residual"), taylor, taylor_tol);
    }
    Ok(())
}

fn wasserstein(o: &mut CheckOutcome, n_pairs: usize, max_atoms: usize, tol: f64, seed: u64) -> Result<(), Error> {
    let mut worst: f64 = 0.0;
    let mut triangle: f64 = f64::INFINITY;
    let mut asym: f64 = 0.0;
    let mut self_dist: f64 = 0.0;
    for k in 0..n_pairs as u64 {
        let s = sub_seed(seed, k);
        let n = 2 + (s % (max_atoms as u64 - 1)) as usize;
        let a = ParticleEnsemble::gaussian(n, 1, 0.0, 1.0, s);
        let b = ParticleEnsemble::gaussian(n, 1, 0.5 * (k % 5) as f64, 0.5 + 0.1 * (k % 7) as f64, s ^ 1);
        let c = ParticleEnsemble::gaussian(n, 1, -0.3, 1.5, s ^ 2);
        let (la, lb, lc) = (a.law(), b.law(), c.law());
        let q = wasserstein2_1d(&la, &lb)?;
        let e = wasserstein2_exact_small(&la, &lb)?;
        worst = worst.max((q - e).abs());
        asym = asym.max((e - wasserstein2_exact_small(&lb, &la)?).abs());
        self_dist = self_dist.max(wasserstein2_exact_small(&la, &la)?);
        let ac = wasserstein2_exact_small(&la, &lc)?;
        let bc = wasserstein2_exact_small(&lb, &lc)?;
        triangle = triangle.min(e + bc - ac);
    }
    o.at_most("quantile_vs_exact", worst, tol);
    o.at_most("asymmetry", asym, tol);
    o.at_most("self_distance", self_dist, tol);
    o.at_least("triangle_margin", triangle, -tol);
    Ok(())
}

/// Output directory: environment override, then config, then the config's directory.
pub fn output_dir(loaded: &LoadedConfig) -> PathBuf {
    if let Some(d) = std::env::var_os(crate::OUTPUT_DIR_ENV).filter(|v| !v.is_empty()) {
        return PathBuf::from(d);
    }
    match &loaded.config.output.dir {
        Some(d) if d.is_absolute() => d.clone(),
        Some(d) => loaded.base_dir.join(d),
        None => loaded.base_dir.clone(),
    }
}
