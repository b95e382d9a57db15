//! Value function V(X, t), its gradient D_X V = Z(t), dynamic-programming and
//! regularity checks, and residuals of the Bellman and master equations.
//!
//! Every evaluation at a later start time s_m reuses the tail of the same lattice,
//! so differences between values share their noise.

use serde::{Deserialize, Serialize};

use crate::ensemble::{h_inner, ParticleEnsemble, PathLattice};
use crate::error::{Error, Result};
use crate::fbsde::{
    cost_standard_error, gaussian_probe_solution, probe_form_derivative, solve_lq_derivative,
    solve_optimal, upsilon_action, FBSolution, PicardConfig, Problem,
};
use crate::functionals::{eval_f, grad_f};
use crate::numeric::log_log_slope;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ValueConfig {
    pub picard: PicardConfig,
    pub probe_seed: u64,
    /// Also evaluate the Gaussian-probe second-order term.
    pub with_probe: bool,
}

impl Default for ValueConfig {
    fn default() -> Self {
        ValueConfig { picard: PicardConfig::default(), probe_seed: 0x5eed, with_probe: true }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValueReport {
    pub value: f64,
    /// D_X V(X, t) of the discrete problem: Z(t) + D F(X) dt.
    pub gradient: ParticleEnsemble,
    /// ((D²_X V σN, σN)); zero without noise.
    pub probe_quadratic: f64,
    pub iterations: usize,
    pub final_gap: f64,
    pub lambda_t: f64,
    /// Monte Carlo standard error of the value from per-particle costs.
    pub standard_error: f64,
}

/// V and D_X V from a solved system.
pub fn report_from_solution(problem: &Problem, sol: &FBSolution, probe_quadratic: f64) -> Result<ValueReport> {
    let n = sol.n_steps();
    let dt = sol.dt();
    let lam = problem.spec.lambda;
    let mut v = 0.0;
    for k in 0..n {
        v += 0.5 / lam * h_inner(&sol.z[k], &sol.z[k])? * dt;
        if !problem.running.is_zero() {
            v += eval_f(&problem.running, &sol.y[k])? * dt;
        }
    }
    v += eval_f(&problem.terminal, &sol.y[n])?;
    let mut gradient = sol.z[0].clone();
    if !problem.running.is_zero() {
        gradient.axpy(dt, &grad_f(&problem.running, &sol.y[0])?)?;
    }
    Ok(ValueReport {
        value: v,
        gradient,
        probe_quadratic,
        iterations: sol.iterations,
        final_gap: sol.final_gap,
        lambda_t: sol.lambda_t,
        standard_error: cost_standard_error(sol, problem)?,
    })
}

/// Solve and report; the solution is returned for further derivative work.
pub fn solve_value(problem: &Problem, x: &ParticleEnsemble, lattice: &PathLattice, cfg: &ValueConfig) -> Result<(ValueReport, FBSolution)> {
    let sol = solve_optimal(problem, x, lattice, &cfg.picard)?;
    let probe = if cfg.with_probe {
        gaussian_probe_solution(&sol, problem, &cfg.picard, cfg.probe_seed)?.map(|p| p.value).unwrap_or(0.0)
    } else {
        0.0
    };
    Ok((report_from_solution(problem, &sol, probe)?, sol))
}

pub fn value(problem: &Problem, x: &ParticleEnsemble, lattice: &PathLattice, cfg: &ValueConfig) -> Result<ValueReport> {
    Ok(solve_value(problem, x, lattice, cfg)?.0)
}

/// V(X, T) = F_T(X), D_X V(X, T) = D_X F_T(X).
pub fn terminal_value(problem: &Problem, x: &ParticleEnsemble) -> Result<ValueReport> {
    Ok(ValueReport {
        value: eval_f(&problem.terminal, x)?,
        gradient: grad_f(&problem.terminal, x)?,
        probe_quadratic: 0.0,
        iterations: 0,
        final_gap: 0.0,
        lambda_t: problem.spec.lambda,
        standard_error: 0.0,
    })
}

/// V(X, s_m) with X taken as the time-s_m ensemble, on the lattice tail.
pub fn value_from_step(problem: &Problem, x: &ParticleEnsemble, lattice: &PathLattice, m: usize, cfg: &ValueConfig) -> Result<ValueReport> {
    if m == lattice.n_steps() {
        return terminal_value(problem, x);
    }
    let tail = lattice.tail(m)?;
    let cfg_np = ValueConfig { with_probe: false, ..*cfg };
    value(problem, x, &tail, &cfg_np)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualKind {
    Dpp,
    Bellman,
    Master,
    TimeRegularity,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResidualSample {
    pub h: f64,
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualReport {
    pub kind: ResidualKind,
    /// Time step of the headline residual.
    pub h: f64,
    pub residual: f64,
    pub rate_estimate: Option<f64>,
    /// Secondary measurement (gradient exponent for time regularity).
    pub secondary_rate: Option<f64>,
    pub samples: Vec<ResidualSample>,
}

impl ResidualReport {
    fn single(kind: ResidualKind, h: f64, residual: f64) -> Self {
        ResidualReport { kind, h, residual, rate_estimate: None, secondary_rate: None, samples: vec![ResidualSample { h, residual }] }
    }
}

/// Central differences of V along unit directions, against ((D_X V, D)).
/// Directions: X/‖X‖, D_X V/‖D_X V‖ and `n_random` Gaussian directions.
pub fn gradient_fd_check(
    problem: &Problem,
    x: &ParticleEnsemble,
    lattice: &PathLattice,
    cfg: &ValueConfig,
    step: f64,
    n_random: usize,
    seed: u64,
) -> Result<f64> {
    if !(step > 0.0) {
        return Err(Error::InvalidArgument("step must be positive".into()));
    }
    let cfg = ValueConfig { with_probe: false, ..*cfg };
    let base = value(problem, x, lattice, &cfg)?;
    let g = &base.gradient;
    let mut dirs = Vec::new();
    for d in [x, g] {
        let nrm = d.norm();
        if nrm > 0.0 {
            dirs.push(d.scaled(1.0 / nrm));
        }
    }
    for r in 0..n_random {
        let d = ParticleEnsemble::gaussian(x.n_particles(), x.dim(), 0.0, 1.0, seed.wrapping_add(r as u64));
        let nrm = d.norm();
        dirs.push(d.scaled(1.0 / nrm));
    }
    let mut worst: f64 = 0.0;
    for d in &dirs {
        let vp = value(problem, &x.lin_comb(1.0, d, step)?, lattice, &cfg)?.value;
        let vm = value(problem, &x.lin_comb(1.0, d, -step)?, lattice, &cfg)?.value;
        let fd = (vp - vm) / (2.0 * step);
        worst = worst.max((fd - h_inner(g, d)?).abs());
    }
    Ok(worst / (1.0 + g.norm()))
}

/// |V(X,t) − [(1/2λ)Σ_{k<m}‖Z_k‖²dt + Σ_{k<m}F(Y_k)dt + V(Y_m, t+h)]| with h = m·dt.
pub fn dpp_check(problem: &Problem, x: &ParticleEnsemble, lattice: &PathLattice, cfg: &ValueConfig, m: usize) -> Result<ResidualReport> {
    let dt = lattice.grid.dt();
    if m == 0 {
        return Ok(ResidualReport::single(ResidualKind::Dpp, 0.0, 0.0));
    }
    if m > lattice.n_steps() {
        return Err(Error::InvalidArgument("t + h exceeds the horizon".into()));
    }
    let cfg = ValueConfig { with_probe: false, ..*cfg };
    let (rep, sol) = solve_value(problem, x, lattice, &cfg)?;
    let lam = problem.spec.lambda;
    let mut partial = 0.0;
    for k in 0..m {
        partial += 0.5 / lam * h_inner(&sol.z[k], &sol.z[k])? * dt;
        if !problem.running.is_zero() {
            partial += eval_f(&problem.running, &sol.y[k])? * dt;
        }
    }
    let rest = value_from_step(problem, &sol.y[m], lattice, m, &cfg)?.value;
    Ok(ResidualReport::single(ResidualKind::Dpp, m as f64 * dt, (rep.value - (partial + rest)).abs()))
}

/// |[V(X,t+h) − V(X,t)]/h + ½Φ − (1/2λ)‖D_X V(X,t)‖² + F(X)| for h = m·dt, m in `steps`.
/// The headline residual is at the first entry of `steps`.
pub fn bellman_residual(problem: &Problem, x: &ParticleEnsemble, lattice: &PathLattice, cfg: &ValueConfig, steps: &[usize]) -> Result<ResidualReport> {
    if steps.is_empty() {
        return Err(Error::InvalidArgument("need at least one h".into()));
    }
    let dt = lattice.grid.dt();
    let cfg_p = ValueConfig { with_probe: true, ..*cfg };
    let base = value(problem, x, lattice, &cfg_p)?;
    let lam = problem.spec.lambda;
    let mut stationary = 0.5 * base.probe_quadratic - 0.5 / lam * h_inner(&base.gradient, &base.gradient)?;
    if !problem.running.is_zero() {
        stationary += eval_f(&problem.running, x)?;
    }
    let mut samples = Vec::new();
    for &m in steps {
        if m == 0 || m > lattice.n_steps() {
            return Err(Error::InvalidArgument(format!("h = {m}·dt is outside (0, T − t]")));
        }
        let h = m as f64 * dt;
        let vh = value_from_step(problem, x, lattice, m, cfg)?.value;
        samples.push(ResidualSample { h, residual: ((vh - base.value) / h + stationary).abs() });
    }
    let hs: Vec<f64> = samples.iter().map(|s| s.h).collect();
    let rs: Vec<f64> = samples.iter().map(|s| s.residual).collect();
    Ok(ResidualReport {
        kind: ResidualKind::Bellman,
        h: samples[0].h,
        residual: samples[0].residual,
        rate_estimate: if samples.len() >= 3 { log_log_slope(&hs, &rs) } else { None },
        secondary_rate: None,
        samples,
    })
}

/// Test directions for the weak-form master residual.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MasterDirections {
    /// Particles whose canonical bumps N·e_i are used.
    pub particles: Vec<usize>,
    /// Also pair with 𝒰/‖𝒰‖.
    pub include_gradient: bool,
}

impl MasterDirections {
    /// `count` evenly spaced particles plus the gradient direction.
    pub fn spread(n_particles: usize, count: usize) -> Self {
        let count = count.min(n_particles).max(1);
        let particles = (0..count).map(|j| j * n_particles / count).collect();
        MasterDirections { particles, include_gradient: true }
    }
}

/// Weak residual of ∂𝒰/∂t + ½D_X((D_X𝒰 σN, σN)) − (1/λ)D_X𝒰·𝒰 + D_X F = 0 with 𝒰 = D_X V.
/// ∂𝒰/∂t uses the one-sided second-order stencil over t, t+h, t+2h (h = m·dt).
pub fn master_residual(
    problem: &Problem,
    x: &ParticleEnsemble,
    lattice: &PathLattice,
    cfg: &ValueConfig,
    m: usize,
    directions: &MasterDirections,
) -> Result<ResidualReport> {
    if !(problem.running.has_third_derivative() && problem.terminal.has_third_derivative()) {
        return Err(Error::MissingDerivative("master residual needs third derivatives".into()));
    }
    let n = lattice.n_steps();
    if m == 0 || 2 * m > n {
        return Err(Error::InvalidArgument(format!("need 0 < 2h <= T − t, got h = {m}·dt with {n} steps")));
    }
    let h = m as f64 * lattice.grid.dt();
    let lam = problem.spec.lambda;
    let cfg_np = ValueConfig { with_probe: false, ..*cfg };
    let (rep0, sol) = solve_value(problem, x, lattice, &cfg_np)?;
    let u0 = rep0.gradient;
    let u1 = value_from_step(problem, x, lattice, m, &cfg_np)?.gradient;
    let u2 = value_from_step(problem, x, lattice, 2 * m, &cfg_np)?.gradient;
    let mut r = u0.scaled(-3.0 / (2.0 * h));
    r.axpy(4.0 / (2.0 * h), &u1)?;
    r.axpy(-1.0 / (2.0 * h), &u2)?;
    if u0.norm() > 0.0 {
        let paths = solve_lq_derivative(&sol, problem, &u0, &cfg.picard)?;
        r.axpy(-1.0 / lam, &upsilon_action(&sol, problem, &paths)?)?;
    }
    if !problem.running.is_zero() {
        r.axpy(1.0, &grad_f(&problem.running, x)?)?;
    }
    let probe = gaussian_probe_solution(&sol, problem, &cfg.picard, cfg.probe_seed)?;
    let np = x.n_particles();
    let d = x.dim();
    let mut worst: f64 = 0.0;
    for &i in &directions.particles {
        if i >= np {
            return Err(Error::InvalidArgument(format!("direction particle {i} out of range")));
        }
        for c in 0..d {
            let mut val = r.particle(i)[c];
            if let Some(p) = &probe {
                let mut bump = ParticleEnsemble::zeros(np, d);
                bump.particle_mut(i)[c] = np as f64;
                val += 0.5 * probe_form_derivative(&sol, problem, p, &bump, &cfg.picard)?;
            }
            worst = worst.max(val.abs());
        }
    }
    if directions.include_gradient && u0.norm() > 0.0 {
        let dir = u0.scaled(1.0 / u0.norm());
        let mut val = h_inner(&r, &dir)?;
        if let Some(p) = &probe {
            val += 0.5 * probe_form_derivative(&sol, problem, p, &dir, &cfg.picard)?;
        }
        worst = worst.max(val.abs());
    }
    Ok(ResidualReport::single(ResidualKind::Master, h, worst))
}

/// Value increments between start steps, normalized as |ΔV|/((1+‖X‖²)|Δt|). The
/// fitted exponents of |ΔV| and ‖ΔD_X V‖ against |Δt| are `rate_estimate` and
/// `secondary_rate`.
pub fn time_regularity(
    problem: &Problem,
    x: &ParticleEnsemble,
    lattice: &PathLattice,
    cfg: &ValueConfig,
    pairs: &[(usize, usize)],
) -> Result<ResidualReport> {
    let dt = lattice.grid.dt();
    let xn = x.norm();
    let mut samples = Vec::new();
    let mut dts = Vec::new();
    let mut dvs = Vec::new();
    let mut dgs = Vec::new();
    for &(k1, k2) in pairs {
        if k1 == k2 {
            samples.push(ResidualSample { h: 0.0, residual: 0.0 });
            continue;
        }
        let a = value_from_step(problem, x, lattice, k1, cfg)?;
        let b = value_from_step(problem, x, lattice, k2, cfg)?;
        let delta = (k2 as f64 - k1 as f64).abs() * dt;
        let dv = (b.value - a.value).abs();
        let dg = b.gradient.sub(&a.gradient)?.norm();
        samples.push(ResidualSample { h: delta, residual: dv / ((1.0 + xn * xn) * delta) });
        dts.push(delta);
        dvs.push(dv);
        dgs.push(dg);
    }
    let worst = samples.iter().map(|s| s.residual).fold(0.0, f64::max);
    let h = samples.iter().map(|s| s.h).fold(0.0, f64::max);
    Ok(ResidualReport {
        kind: ResidualKind::TimeRegularity,
        h,
        residual: worst,
        rate_estimate: log_log_slope(&dts, &dvs),
        secondary_rate: log_log_slope(&dts, &dgs),
        samples,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LawInvarianceReport {
    pub max_abs_diff: f64,
    pub standard_error: f64,
}

/// max over seeded particle permutations π of |V(πX, t) − V(X, t)|, lattice unchanged.
pub fn law_invariance_check(
    problem: &Problem,
    x: &ParticleEnsemble,
    lattice: &PathLattice,
    cfg: &ValueConfig,
    n_perms: usize,
    seed: u64,
) -> Result<LawInvarianceReport> {
    let cfg = ValueConfig { with_probe: false, ..*cfg };
    let base = value(problem, x, lattice, &cfg)?;
    let mut worst: f64 = 0.0;
    for p in 0..n_perms {
        let perm = rng::permutation(x.n_particles(), seed.wrapping_add(p as u64));
        let v = value(problem, &x.permuted(&perm), lattice, &cfg)?.value;
        worst = worst.max((v - base.value).abs());
    }
    Ok(LawInvarianceReport { max_abs_diff: worst, standard_error: base.standard_error })
}

/// |V(X+ε𝒳) − V(X) − ε((𝒳, D_X V)) − ½ε²((Υ𝒳, 𝒳))| / (ε‖𝒳‖)² for each ε.
pub fn second_order_expansion(
    problem: &Problem,
    x: &ParticleEnsemble,
    lattice: &PathLattice,
    cfg: &ValueConfig,
    xdir: &ParticleEnsemble,
    eps: &[f64],
) -> Result<Vec<ResidualSample>> {
    let cfg = ValueConfig { with_probe: false, ..*cfg };
    let (rep, sol) = solve_value(problem, x, lattice, &cfg)?;
    let paths = solve_lq_derivative(&sol, problem, xdir, &cfg.picard)?;
    let q = h_inner(&upsilon_action(&sol, problem, &paths)?, xdir)?;
    let lin = h_inner(&rep.gradient, xdir)?;
    let n2 = xdir.norm().powi(2);
    let mut out = Vec::new();
    for &e in eps {
        let v = value(problem, &x.lin_comb(1.0, xdir, e)?, lattice, &cfg)?.value;
        let r = (v - rep.value - e * lin - 0.5 * e * e * q).abs() / (e * e * n2);
        out.push(ResidualSample { h: e, residual: r });
    }
    Ok(out)
}
