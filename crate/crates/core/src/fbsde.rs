//! Forward-backward optimality system solved by damped Picard iteration, the
//! control cost and its gradient, and the linearized systems behind second
//! derivatives of the value function.
//!
//! Discretization on the grid s_0 < .. < s_N:
//!
//! ```text
//! Y_0 = X,  Y_{k+1} = Y_k − Z_k dt/λ + σ ΔW_k
//! Z_k = Ê[ D F_T(Y_N) + Σ_{j>k} D F(Y_j) dt | features at s_k ],  Z_N = D F_T(Y_N)
//! ```
//!
//! The strict sum j > k makes λ v_k + (the conditional target) the exact gradient of the
//! left-endpoint discrete cost, so the discrete fixed point is the discrete optimum.
//! Without noise Ê is the identity.

use serde::{Deserialize, Serialize};

use crate::ensemble::{
    flow_gap, h_inner, EmpiricalBasis, EmpiricalLaw, LatticeSampling, ParticleEnsemble, PathLattice,
    TimeGrid,
};
use crate::error::{Error, Result};
use crate::functionals::{
    eval_f, grad_f, hess_action, integrand_values, lambda_t, third_action, Atoms, Functional,
    FunctionalBounds, ProblemSpec,
};
use crate::numeric::{mat_vec, pairwise_sum_by};
use crate::regression::{monomials, project, Fit, RegressionMode, RegressionSpec};
use crate::rng::{self, Domain};

/// Running cost F, terminal cost F_T and the problem data.
#[derive(Debug, Clone, PartialEq)]
pub struct Problem {
    pub running: Functional,
    pub terminal: Functional,
    pub spec: ProblemSpec,
}

impl Problem {
    pub fn new(running: Functional, terminal: Functional, spec: ProblemSpec) -> Result<Self> {
        if running.dim != spec.dim || terminal.dim != spec.dim {
            return Err(Error::ShapeMismatch("functional and problem dimensions differ".into()));
        }
        Ok(Problem { running, terminal, spec })
    }

    pub fn bounds(&self) -> FunctionalBounds {
        FunctionalBounds::from_pair(&self.running, &self.terminal)
    }

    /// λ_T over the horizon of `lattice`.
    pub fn lambda_t_on(&self, lattice: &PathLattice) -> f64 {
        lambda_t_for(self, lattice.grid)
    }

    fn check(&self, x: &ParticleEnsemble, lattice: &PathLattice) -> Result<()> {
        if x.dim() != self.spec.dim || lattice.dim() != self.spec.dim {
            return Err(Error::ShapeMismatch("ensemble, lattice and problem dimensions differ".into()));
        }
        if x.n_particles() != lattice.n_particles() {
            return Err(Error::ShapeMismatch(format!(
                "ensemble has {} particles, lattice {}",
                x.n_particles(),
                lattice.n_particles()
            )));
        }
        Ok(())
    }
}

/// Control values v(s_k) on left endpoints, k = 0..n_steps.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlProcess {
    pub values: Vec<ParticleEnsemble>,
    pub adapted: bool,
}

impl ControlProcess {
    pub fn zeros(n_steps: usize, n_particles: usize, dim: usize) -> Self {
        ControlProcess { values: vec![ParticleEnsemble::zeros(n_particles, dim); n_steps], adapted: true }
    }

    pub fn constant(n_steps: usize, n_particles: usize, a: &[f64]) -> Self {
        ControlProcess { values: vec![ParticleEnsemble::constant(n_particles, a); n_steps], adapted: true }
    }

    /// −Z/λ on steps 0..n_steps.
    pub fn from_costate(z: &[ParticleEnsemble], lambda: f64) -> Self {
        let n = z.len() - 1;
        ControlProcess { values: z[..n].iter().map(|zk| zk.scaled(-1.0 / lambda)).collect(), adapted: true }
    }

    pub fn n_steps(&self) -> usize {
        self.values.len()
    }

    pub fn lin_comb(&self, a: f64, other: &ControlProcess, b: f64) -> Result<ControlProcess> {
        if self.n_steps() != other.n_steps() {
            return Err(Error::ShapeMismatch("controls have different step counts".into()));
        }
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(x, y)| x.lin_comb(a, y, b))
            .collect::<Result<Vec<_>>>()?;
        Ok(ControlProcess { values, adapted: self.adapted && other.adapted })
    }

    /// Σ_k ((self_k, other_k)) dt.
    pub fn inner(&self, other: &ControlProcess, dt: f64) -> Result<f64> {
        let mut s = 0.0;
        for (x, y) in self.values.iter().zip(&other.values) {
            s += h_inner(x, y)? * dt;
        }
        Ok(s)
    }
}

/// Which σ-algebra the conditional expectations project onto.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Conditioning {
    /// The state Y(s_k) (Markov reduction).
    #[default]
    State,
    /// The initial value and the accumulated noise (X, W(s_k) − W(t)).
    InitialAndNoise,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PicardConfig {
    pub max_iters: usize,
    pub tol: f64,
    pub damping: f64,
    pub regression: RegressionSpec,
    pub conditioning: Conditioning,
    /// Reject problems with λ_T ≤ 0 before iterating.
    pub check_admission: bool,
    /// Consecutive gap increases that count as divergence.
    pub divergence_window: usize,
}

impl Default for PicardConfig {
    fn default() -> Self {
        PicardConfig {
            max_iters: 200,
            tol: 1e-8,
            damping: 0.5,
            regression: RegressionSpec::default(),
            conditioning: Conditioning::State,
            check_admission: true,
            divergence_window: 5,
        }
    }
}

impl PicardConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0 && self.tol.is_finite()) {
            return Err(Error::InvalidArgument("tol must be positive".into()));
        }
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(Error::InvalidArgument("damping must be in (0, 1]".into()));
        }
        if self.max_iters == 0 {
            return Err(Error::InvalidArgument("max_iters must be >= 1".into()));
        }
        if self.divergence_window == 0 {
            return Err(Error::InvalidArgument("divergence_window must be >= 1".into()));
        }
        self.regression.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FBSolution {
    pub y: Vec<ParticleEnsemble>,
    pub z: Vec<ParticleEnsemble>,
    pub control: ControlProcess,
    pub measure_flow: Vec<EmpiricalLaw>,
    pub iterations: usize,
    pub final_gap: f64,
    pub gap_history: Vec<f64>,
    pub lattice: PathLattice,
    pub lambda_t: f64,
}

impl FBSolution {
    pub fn n_steps(&self) -> usize {
        self.y.len() - 1
    }

    pub fn dt(&self) -> f64 {
        self.lattice.grid.dt()
    }

    pub fn initial(&self) -> &ParticleEnsemble {
        &self.y[0]
    }
}

/// X(s_k) = X + Σ_{j<k} v_j dt + σ(w(s_k) − w(t)), accumulated step by step.
pub fn simulate_state(spec: &ProblemSpec, x: &ParticleEnsemble, v: &ControlProcess, lattice: &PathLattice) -> Result<Vec<ParticleEnsemble>> {
    if v.n_steps() != lattice.n_steps() {
        return Err(Error::ShapeMismatch(format!(
            "control has {} steps, lattice {}",
            v.n_steps(),
            lattice.n_steps()
        )));
    }
    for vk in &v.values {
        x.check_shape(vk)?;
    }
    if x.n_particles() != lattice.n_particles() || x.dim() != lattice.dim() || x.dim() != spec.dim {
        return Err(Error::ShapeMismatch("ensemble and lattice shapes differ".into()));
    }
    let dt = lattice.grid.dt();
    let noiseless = spec.is_noiseless();
    let d = x.dim();
    let mut path = Vec::with_capacity(lattice.n_steps() + 1);
    path.push(x.clone());
    let mut sw = vec![0.0; d];
    for k in 0..lattice.n_steps() {
        let mut next = path[k].clone();
        next.axpy(dt, &v.values[k])?;
        if !noiseless {
            let inc = lattice.increment(k);
            for i in 0..x.n_particles() {
                mat_vec(&spec.sigma, &inc[i * d..(i + 1) * d], &mut sw);
                for (a, b) in next.particle_mut(i).iter_mut().zip(&sw) {
                    *a += b;
                }
            }
        }
        path.push(next);
    }
    Ok(path)
}

/// (λ/2) Σ_k ‖v_k‖² dt + Σ_k F(X(s_k)) dt + F_T(X(T)).
pub fn cost(problem: &Problem, x: &ParticleEnsemble, v: &ControlProcess, lattice: &PathLattice) -> Result<f64> {
    problem.check(x, lattice)?;
    let path = simulate_state(&problem.spec, x, v, lattice)?;
    path_cost(problem, &path, v, lattice.grid.dt())
}

fn path_cost(problem: &Problem, path: &[ParticleEnsemble], v: &ControlProcess, dt: f64) -> Result<f64> {
    let n = v.n_steps();
    let mut c = 0.0;
    for k in 0..n {
        c += 0.5 * problem.spec.lambda * h_inner(&v.values[k], &v.values[k])? * dt;
        if !problem.running.is_zero() {
            c += eval_f(&problem.running, &path[k])? * dt;
        }
    }
    c += eval_f(&problem.terminal, &path[n])?;
    if !c.is_finite() {
        return Err(Error::NumericalOverflow("cost is not finite".into()));
    }
    Ok(c)
}

/// Per-particle cost contributions; their mean is the cost.
pub fn cost_contributions(problem: &Problem, path: &[ParticleEnsemble], v: &ControlProcess, dt: f64) -> Result<Vec<f64>> {
    let n_steps = v.n_steps();
    let np = path[0].n_particles();
    let mut c = vec![0.0; np];
    for k in 0..n_steps {
        let f = integrand_values(&problem.running, &path[k])?;
        for i in 0..np {
            let vi = v.values[k].particle(i);
            c[i] += (0.5 * problem.spec.lambda * vi.iter().map(|a| a * a).sum::<f64>() + f[i]) * dt;
        }
    }
    let h = integrand_values(&problem.terminal, &path[n_steps])?;
    for i in 0..np {
        c[i] += h[i];
    }
    Ok(c)
}

fn features_at<'a>(
    conditioning: Conditioning,
    path: &'a [ParticleEnsemble],
    noise: Option<&'a [ParticleEnsemble]>,
    k: usize,
) -> Vec<&'a ParticleEnsemble> {
    match conditioning {
        Conditioning::State => vec![&path[k]],
        Conditioning::InitialAndNoise => vec![&path[0], &noise.expect("noise path")[k]],
    }
}

/// Ê[target | features]. Without noise every quantity is a function of the initial
/// ensemble, so the conditional expectation is the identity.
fn conditional(
    problem: &Problem,
    features: &[&ParticleEnsemble],
    target: &ParticleEnsemble,
    reg: &RegressionSpec,
    step: usize,
) -> Result<ParticleEnsemble> {
    if problem.spec.is_noiseless() {
        return Ok(target.clone());
    }
    project(features, target, reg, step)
}

/// Conditional targets Ê[D F_T(Y_N) + Σ_{j>k} D F(Y_j) dt | features_k] for k = 0..=N.
fn backward_targets(
    problem: &Problem,
    path: &[ParticleEnsemble],
    noise: Option<&[ParticleEnsemble]>,
    conditioning: Conditioning,
    reg: &RegressionSpec,
    dt: f64,
) -> Result<Vec<ParticleEnsemble>> {
    let n = path.len() - 1;
    let mut acc = grad_f(&problem.terminal, &path[n])?;
    let mut out = vec![ParticleEnsemble::zeros(0, 1); n + 1];
    out[n] = acc.clone();
    for k in (0..n).rev() {
        let feats = features_at(conditioning, path, noise, k);
        out[k] = conditional(problem, &feats, &acc, reg, k)?;
        if !problem.running.is_zero() {
            acc.axpy(dt, &grad_f(&problem.running, &path[k])?)?;
        }
    }
    Ok(out)
}

/// Gradient of the discrete cost with respect to the control, per unit dt:
/// λ v_k + Ê[D F_T(X(T)) + Σ_{j>k} D F(X(s_j)) dt | features at s_k].
pub fn cost_gradient(
    problem: &Problem,
    x: &ParticleEnsemble,
    v: &ControlProcess,
    lattice: &PathLattice,
    reg: &RegressionSpec,
    conditioning: Conditioning,
) -> Result<ControlProcess> {
    problem.check(x, lattice)?;
    let path = simulate_state(&problem.spec, x, v, lattice)?;
    let noise = lattice.cumulative();
    let targets = backward_targets(problem, &path, Some(&noise), conditioning, reg, lattice.grid.dt())?;
    let values = (0..v.n_steps())
        .map(|k| v.values[k].lin_comb(problem.spec.lambda, &targets[k], 1.0))
        .collect::<Result<Vec<_>>>()?;
    Ok(ControlProcess { values, adapted: v.adapted })
}

/// Σ_k ((D_v J(v1) − D_v J(v2), v1 − v2)) dt − λ_T Σ_k ‖v1 − v2‖² dt.
pub fn monotonicity_check(
    problem: &Problem,
    x: &ParticleEnsemble,
    v1: &ControlProcess,
    v2: &ControlProcess,
    lattice: &PathLattice,
    reg: &RegressionSpec,
) -> Result<f64> {
    let dt = lattice.grid.dt();
    let g1 = cost_gradient(problem, x, v1, lattice, reg, Conditioning::InitialAndNoise)?;
    let g2 = cost_gradient(problem, x, v2, lattice, reg, Conditioning::InitialAndNoise)?;
    let dv = v1.lin_comb(1.0, v2, -1.0)?;
    let dg = g1.lin_comb(1.0, &g2, -1.0)?;
    Ok(dg.inner(&dv, dt)? - problem.lambda_t_on(lattice) * dv.inner(&dv, dt)?)
}

/// Random adapted control: at step k a random polynomial of total degree ≤ `degree`
/// in (X, W(s_k) − W(t)), so it lies in the span used by initial-and-noise conditioning.
pub fn random_adapted_control(x: &ParticleEnsemble, lattice: &PathLattice, degree: usize, scale: f64, seed: u64) -> Result<ControlProcess> {
    let noise = lattice.cumulative();
    let d = x.dim();
    let n = x.n_particles();
    let mut values = Vec::with_capacity(lattice.n_steps());
    for k in 0..lattice.n_steps() {
        let feats = ParticleEnsemble::hstack(&[x, &noise[k]])?;
        let nf = feats.dim();
        // Coefficients drawn per (step, output component, monomial slot).
        let mut out = ParticleEnsemble::zeros(n, d);
        let mono = monomials(nf, degree);
        for c in 0..d {
            let coef: Vec<f64> = (0..mono.len())
                .map(|m| scale * rng::normal_at(seed, Domain::Sample, 1_000 + k as u64, (c * mono.len() + m) as u64) / (1.0 + m as f64).sqrt())
                .collect();
            for i in 0..n {
                let z = feats.particle(i);
                let mut v = 0.0;
                for (m, e) in mono.iter().enumerate() {
                    let mut t = coef[m];
                    for (j, &p) in e.iter().enumerate() {
                        t *= z[j].powi(p as i32);
                    }
                    v += t;
                }
                out.particle_mut(i)[c] = v;
            }
        }
        values.push(out);
    }
    Ok(ControlProcess { values, adapted: true })
}

fn forward_feedback(spec: &ProblemSpec, x: &ParticleEnsemble, z: &[ParticleEnsemble], lattice: &PathLattice) -> Result<Vec<ParticleEnsemble>> {
    simulate_state(spec, x, &ControlProcess::from_costate(z, spec.lambda), lattice)
}

pub(crate) struct GapTracker {
    pub(crate) history: Vec<f64>,
    rising: usize,
    window: usize,
}

impl GapTracker {
    pub(crate) fn new(window: usize) -> Self {
        GapTracker { history: vec![], rising: 0, window }
    }

    pub(crate) fn push(&mut self, gap: f64) -> Result<()> {
        if !gap.is_finite() {
            return Err(Error::NotContractive { consecutive: self.rising + 1, gap });
        }
        if let Some(&prev) = self.history.last() {
            if gap > prev {
                self.rising += 1;
            } else {
                self.rising = 0;
            }
        }
        self.history.push(gap);
        if self.rising >= self.window {
            return Err(Error::NotContractive { consecutive: self.rising, gap });
        }
        Ok(())
    }
}

/// λ_T of `problem` over the interval of `grid`.
pub fn lambda_t_for(problem: &Problem, grid: TimeGrid) -> f64 {
    lambda_t(&problem.spec.with_horizon(grid), &problem.bounds())
}

/// Solve the optimality system from the time-t ensemble `x` on `lattice`.
pub fn solve_optimal(problem: &Problem, x: &ParticleEnsemble, lattice: &PathLattice, cfg: &PicardConfig) -> Result<FBSolution> {
    cfg.validate()?;
    problem.check(x, lattice)?;
    let lt = problem.lambda_t_on(lattice);
    if cfg.check_admission && lt <= 0.0 {
        return Err(Error::AdmissionRejected(lt));
    }
    let spec = &problem.spec;
    let n = lattice.n_steps();
    let dt = lattice.grid.dt();
    let noise = lattice.cumulative();
    let mut z = vec![ParticleEnsemble::zeros(x.n_particles(), x.dim()); n + 1];
    let mut y = forward_feedback(spec, x, &z, lattice)?;
    let mut tracker = GapTracker::new(cfg.divergence_window);
    let theta = cfg.damping;
    for iter in 1..=cfg.max_iters {
        let z_new = match cfg.regression.mode {
            _ if spec.is_noiseless() => backward_targets(problem, &y, Some(&noise), cfg.conditioning, &cfg.regression, dt)?,
            RegressionMode::Regression => backward_targets(problem, &y, Some(&noise), cfg.conditioning, &cfg.regression, dt)?,
            RegressionMode::ExactNested => nested_targets(problem, &y, &z, lattice, &cfg.regression)?,
        };
        let mut gap_z: f64 = 0.0;
        let mut damped = Vec::with_capacity(n + 1);
        for k in 0..n {
            let zk = z[k].lin_comb(1.0 - theta, &z_new[k], theta)?;
            gap_z = gap_z.max(crate::ensemble::h_dist(&zk, &z[k])?);
            damped.push(zk);
        }
        damped.push(z_new[n].clone());
        let y_next = forward_feedback(spec, x, &damped, lattice)?;
        let mut gap_w: f64 = 0.0;
        for k in 0..=n {
            gap_w = gap_w.max(flow_gap(&y_next[k], &y[k])?);
        }
        let gap = gap_z + gap_w;
        z = damped;
        y = y_next;
        tracker.push(gap)?;
        if gap <= cfg.tol {
            z[n] = grad_f(&problem.terminal, &y[n])?;
            let measure_flow = y.iter().map(|e| e.law()).collect();
            return Ok(FBSolution {
                control: ControlProcess::from_costate(&z, spec.lambda),
                y,
                z,
                measure_flow,
                iterations: iter,
                final_gap: gap,
                gap_history: tracker.history,
                lattice: lattice.clone(),
                lambda_t: lt,
            });
        }
    }
    Err(Error::MaxItersExceeded { iters: cfg.max_iters, gap: *tracker.history.last().unwrap_or(&f64::NAN) })
}

/// Conditional targets by resimulation: every particle's state at s_k is propagated
/// along every particle's future noise, with the current costate iterate as feedback.
fn nested_targets(
    problem: &Problem,
    y: &[ParticleEnsemble],
    z: &[ParticleEnsemble],
    lattice: &PathLattice,
    reg: &RegressionSpec,
) -> Result<Vec<ParticleEnsemble>> {
    let spec = &problem.spec;
    let n = lattice.n_steps();
    let np = y[0].n_particles();
    let d = y[0].dim();
    let dt = lattice.grid.dt();
    let lam = spec.lambda;
    let feedback: Vec<Fit> = (0..n).map(|k| Fit::new(&[&y[k]], &z[k], reg, k)).collect::<Result<_>>()?;
    let run_stats: Vec<_> = y.iter().map(|e| problem.running.stats(Atoms::of(e))).collect();
    let term_stats = problem.terminal.stats(Atoms::of(&y[n]));
    let mut out = vec![ParticleEnsemble::zeros(np, d); n + 1];
    out[n] = grad_f(&problem.terminal, &y[n])?;
    let mut state = vec![0.0; d];
    let mut zf = vec![0.0; d];
    let mut g = vec![0.0; d];
    let mut acc = vec![0.0; d];
    let mut sw = vec![0.0; d];
    for k in 0..n {
        for i in 0..np {
            let mut total = vec![0.0; d];
            for j in 0..np {
                state.copy_from_slice(y[k].particle(i));
                acc.iter_mut().for_each(|a| *a = 0.0);
                for l in k..n {
                    if l > k && !problem.running.is_zero() {
                        problem.running.grad_point(&state, &run_stats[l], &mut g);
                        for c in 0..d {
                            acc[c] += g[c] * dt;
                        }
                    }
                    feedback[l].predict_point(&state, &mut zf);
                    let inc = &lattice.increment(l)[j * d..(j + 1) * d];
                    mat_vec(&spec.sigma, inc, &mut sw);
                    for c in 0..d {
                        state[c] += -zf[c] * dt / lam + sw[c];
                    }
                }
                problem.terminal.grad_point(&state, &term_stats, &mut g);
                for c in 0..d {
                    total[c] += acc[c] + g[c];
                }
            }
            for c in 0..d {
                out[k].particle_mut(i)[c] = total[c] / np as f64;
            }
        }
    }
    Ok(out)
}

/// Paths of a linearized system along a frozen base solution.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearPaths {
    pub y: Vec<ParticleEnsemble>,
    pub z: Vec<ParticleEnsemble>,
    pub iterations: usize,
    pub final_gap: f64,
}

/// Extra conditioning information for a linearized system.
#[derive(Debug, Clone, Copy)]
pub enum Extra<'a> {
    Constant(&'a ParticleEnsemble),
    Path(&'a [ParticleEnsemble]),
}

/// Inhomogeneous source terms, running (per step 0..N) and terminal.
#[derive(Debug, Clone, Copy)]
pub struct Sources<'a> {
    pub running: &'a [ParticleEnsemble],
    pub terminal: &'a ParticleEnsemble,
}

/// Solve 𝒴_{k+1} = 𝒴_k − 𝒵_k dt/λ, 𝒴_0 = initial,
/// 𝒵_k = Ê[D²F_T(Y_N)𝒴_N + s_T + Σ_{j>k}(D²F(Y_j)𝒴_j + s_j) dt | Y_k, 𝒴_k, extras].
pub fn solve_linear_system(
    base: &FBSolution,
    problem: &Problem,
    initial: &ParticleEnsemble,
    extras: &[Extra],
    sources: Option<Sources>,
    cfg: &PicardConfig,
) -> Result<LinearPaths> {
    cfg.validate()?;
    base.initial().check_shape(initial)?;
    let n = base.n_steps();
    let dt = base.dt();
    let lam = problem.spec.lambda;
    let np = initial.n_particles();
    let d = initial.dim();
    let mut reg = cfg.regression;
    reg.mode = RegressionMode::Regression;
    let tol = cfg.tol * (1.0 + initial.norm());
    let mut zz = vec![ParticleEnsemble::zeros(np, d); n + 1];
    let forward = |zz: &[ParticleEnsemble]| -> Result<Vec<ParticleEnsemble>> {
        let mut yy = Vec::with_capacity(n + 1);
        yy.push(initial.clone());
        for k in 0..n {
            yy.push(yy[k].lin_comb(1.0, &zz[k], -dt / lam)?);
        }
        Ok(yy)
    };
    let mut yy = forward(&zz)?;
    let mut tracker = GapTracker::new(cfg.divergence_window);
    let theta = cfg.damping;
    for iter in 1..=cfg.max_iters {
        let mut acc = hess_action(&problem.terminal, &base.y[n], &yy[n])?;
        if let Some(s) = sources {
            acc.axpy(1.0, s.terminal)?;
        }
        let mut z_new = vec![ParticleEnsemble::zeros(0, 1); n + 1];
        z_new[n] = acc.clone();
        for k in (0..n).rev() {
            let mut feats: Vec<&ParticleEnsemble> = vec![&base.y[k], &yy[k]];
            for e in extras {
                match e {
                    Extra::Constant(c) => feats.push(c),
                    Extra::Path(p) => feats.push(&p[k]),
                }
            }
            z_new[k] = conditional(problem, &feats, &acc, &reg, k)?;
            if !problem.running.is_zero() {
                acc.axpy(dt, &hess_action(&problem.running, &base.y[k], &yy[k])?)?;
            }
            if let Some(s) = sources {
                acc.axpy(dt, &s.running[k])?;
            }
        }
        let mut gap: f64 = 0.0;
        let mut damped = Vec::with_capacity(n + 1);
        for k in 0..n {
            let zk = zz[k].lin_comb(1.0 - theta, &z_new[k], theta)?;
            gap = gap.max(crate::ensemble::h_dist(&zk, &zz[k])?);
            damped.push(zk);
        }
        damped.push(z_new[n].clone());
        zz = damped;
        yy = forward(&zz)?;
        tracker.push(gap)?;
        if gap <= tol {
            let mut last = hess_action(&problem.terminal, &base.y[n], &yy[n])?;
            if let Some(s) = sources {
                last.axpy(1.0, s.terminal)?;
            }
            zz[n] = last;
            return Ok(LinearPaths { y: yy, z: zz, iterations: iter, final_gap: gap });
        }
    }
    Err(Error::MaxItersExceeded { iters: cfg.max_iters, gap: *tracker.history.last().unwrap_or(&f64::NAN) })
}

/// The linearized system in direction 𝒳 with conditioning on (Y, 𝒴).
pub fn solve_lq_derivative(base: &FBSolution, problem: &Problem, xdir: &ParticleEnsemble, cfg: &PicardConfig) -> Result<LinearPaths> {
    solve_linear_system(base, problem, xdir, &[], None, cfg)
}

/// Υ(t)𝒳 for the discrete problem: 𝒵_0 + D²F(X)𝒳 dt, the derivative of the
/// discrete gradient Z_0 + D F(X) dt.
pub fn upsilon_action(base: &FBSolution, problem: &Problem, paths: &LinearPaths) -> Result<ParticleEnsemble> {
    let mut u = paths.z[0].clone();
    if !problem.running.is_zero() {
        u.axpy(base.dt(), &hess_action(&problem.running, &base.y[0], &paths.y[0])?)?;
    }
    Ok(u)
}

/// ½((Υ(t)𝒳, 𝒳)).
pub fn second_derivative_quadratic_form(base: &FBSolution, problem: &Problem, xdir: &ParticleEnsemble, cfg: &PicardConfig) -> Result<f64> {
    if xdir.norm() == 0.0 {
        return Ok(0.0);
    }
    let paths = solve_lq_derivative(base, problem, xdir, cfg)?;
    Ok(0.5 * h_inner(&upsilon_action(base, problem, &paths)?, xdir)?)
}

/// Payoff of the linear-quadratic problem for the control 𝒱 = −𝒵/λ:
/// (λ/2)Σ‖𝒱‖²dt + ½Σ((D²F(Y)𝒴, 𝒴))dt + ½((D²F_T(Y_N)𝒴_N, 𝒴_N)).
pub fn lq_payoff(base: &FBSolution, problem: &Problem, paths: &LinearPaths) -> Result<f64> {
    let n = base.n_steps();
    let dt = base.dt();
    let lam = problem.spec.lambda;
    let mut j = 0.0;
    for k in 0..n {
        j += 0.5 / lam * h_inner(&paths.z[k], &paths.z[k])? * dt;
        if !problem.running.is_zero() {
            j += 0.5 * h_inner(&hess_action(&problem.running, &base.y[k], &paths.y[k])?, &paths.y[k])? * dt;
        }
    }
    j += 0.5 * h_inner(&hess_action(&problem.terminal, &base.y[n], &paths.y[n])?, &paths.y[n])?;
    Ok(j)
}

/// Φ = (1/λ)Σ‖𝒵‖²dt + Σ((D²F(Y)𝒴, 𝒴))dt + ((D²F_T(Y_N)𝒴_N, 𝒴_N)) for a solved linear system.
pub fn quadratic_form_by_paths(base: &FBSolution, problem: &Problem, paths: &LinearPaths) -> Result<f64> {
    Ok(2.0 * lq_payoff(base, problem, paths)?)
}

/// Standard Gaussian probe ensemble independent of the initial data and the lattice.
/// With an orthogonal lattice it is also orthogonalized against constants, the
/// initial ensemble and every increment column, and standardized.
pub fn probe_ensemble(base: &FBSolution, probe_seed: u64) -> Result<ParticleEnsemble> {
    let x = base.initial();
    let np = x.n_particles();
    let d = x.dim();
    let mut raw = vec![0.0; np * d];
    rng::fill_normals(probe_seed, Domain::Probe, 0, &mut raw);
    if base.lattice.sampling == LatticeSampling::Iid {
        return ParticleEnsemble::from_samples(d, raw);
    }
    let lat = &base.lattice;
    let needed = 1 + d + lat.n_steps() * d + d;
    if np <= needed {
        return Err(Error::InvalidDimension(format!("orthogonal probe needs more than {needed} particles")));
    }
    let mut basis = EmpiricalBasis::new(np);
    basis.push(vec![1.0; np]);
    basis.push_ensemble_columns(x);
    for k in 0..lat.n_steps() {
        let inc = ParticleEnsemble::from_samples(d, lat.increment(k).to_vec())?;
        basis.push_ensemble_columns(&inc);
    }
    let mut out = ParticleEnsemble::zeros(np, d);
    for c in 0..d {
        let col: Vec<f64> = (0..np).map(|i| raw[i * d + c]).collect();
        let start = basis.len();
        basis.push(col);
        if basis.len() == start {
            return Err(Error::NumericalOverflow("degenerate probe column".into()));
        }
        let q = basis.last();
        for i in 0..np {
            out.particle_mut(i)[c] = q[i];
        }
    }
    Ok(out)
}

/// Probe system: linearized paths started at σN, conditioned also on N.
pub struct ProbeSolution {
    pub probe: ParticleEnsemble,
    pub paths: LinearPaths,
    pub value: f64,
}

/// ((D²_X V σN, σN)) through the path formula of the probe system.
pub fn gaussian_probe_solution(base: &FBSolution, problem: &Problem, cfg: &PicardConfig, probe_seed: u64) -> Result<Option<ProbeSolution>> {
    if problem.spec.is_noiseless() {
        return Ok(None);
    }
    let probe = probe_ensemble(base, probe_seed)?;
    let initial = problem.spec.apply_sigma(&probe);
    let paths = solve_linear_system(base, problem, &initial, &[Extra::Constant(&probe)], None, cfg)?;
    let value = quadratic_form_by_paths(base, problem, &paths)?;
    Ok(Some(ProbeSolution { probe, paths, value }))
}

pub fn gaussian_probe(base: &FBSolution, problem: &Problem, cfg: &PicardConfig, probe_seed: u64) -> Result<f64> {
    Ok(gaussian_probe_solution(base, problem, cfg, probe_seed)?.map(|p| p.value).unwrap_or(0.0))
}

/// Both sides of the energy identity
/// ((X, Z(t) + DF(X)dt)) = (1/λ)Σ‖Z‖²dt + ((DF_T(Y_N), Y_N)) + Σ((DF(Y), Y))dt.
pub fn energy_identity(base: &FBSolution, problem: &Problem) -> Result<(f64, f64)> {
    let n = base.n_steps();
    let dt = base.dt();
    let lam = problem.spec.lambda;
    let mut g0 = base.z[0].clone();
    let mut rhs = h_inner(&grad_f(&problem.terminal, &base.y[n])?, &base.y[n])?;
    if !problem.running.is_zero() {
        g0.axpy(dt, &grad_f(&problem.running, &base.y[0])?)?;
    }
    for k in 0..n {
        rhs += h_inner(&base.z[k], &base.z[k])? * dt / lam;
        if !problem.running.is_zero() {
            rhs += h_inner(&grad_f(&problem.running, &base.y[k])?, &base.y[k])? * dt;
        }
    }
    Ok((h_inner(&base.y[0], &g0)?, rhs))
}

/// Third-derivative pieces of the probe quadratic form in direction X̃.
pub fn probe_form_derivative(
    base: &FBSolution,
    problem: &Problem,
    probe: &ProbeSolution,
    xdir: &ParticleEnsemble,
    cfg: &PicardConfig,
) -> Result<f64> {
    let n = base.n_steps();
    let dt = base.dt();
    let lam = problem.spec.lambda;
    let tilde = solve_lq_derivative(base, problem, xdir, cfg)?;
    let yp = &probe.paths.y;
    let run_src: Vec<ParticleEnsemble> = (0..=n)
        .map(|k| third_action(&problem.running, &base.y[k], &tilde.y[k], &yp[k]))
        .collect::<Result<_>>()?;
    let term_src = third_action(&problem.terminal, &base.y[n], &tilde.y[n], &yp[n])?;
    let zero = ParticleEnsemble::zeros(xdir.n_particles(), xdir.dim());
    let prime = solve_linear_system(
        base,
        problem,
        &zero,
        &[Extra::Constant(&probe.probe), Extra::Path(yp), Extra::Path(&tilde.y)],
        Some(Sources { running: &run_src, terminal: &term_src }),
        cfg,
    )?;
    let mut v = 0.0;
    for k in 0..n {
        v += 2.0 / lam * h_inner(&probe.paths.z[k], &prime.z[k])? * dt;
        v += h_inner(&run_src[k], &yp[k])? * dt;
        if !problem.running.is_zero() {
            v += 2.0 * h_inner(&hess_action(&problem.running, &base.y[k], &prime.y[k])?, &yp[k])? * dt;
        }
    }
    v += h_inner(&term_src, &yp[n])?;
    v += 2.0 * h_inner(&hess_action(&problem.terminal, &base.y[n], &prime.y[n])?, &yp[n])?;
    Ok(v)
}

/// Standard error of the mean of per-particle costs at the solution.
pub fn cost_standard_error(base: &FBSolution, problem: &Problem) -> Result<f64> {
    let c = cost_contributions(problem, &base.y, &base.control, base.dt())?;
    let n = c.len();
    let m = pairwise_sum_by(n, |i| c[i]) / n as f64;
    let var = pairwise_sum_by(n, |i| (c[i] - m).powi(2)) / (n as f64 - 1.0);
    Ok((var / n as f64).sqrt())
}
