//! One-dimensional finite-difference solver for the coupled HJB and Fokker-Planck
//! equations, used as an independent oracle for the particle solver.
//!
//! With A = −½a∂², a = σ²:
//!
//! ```text
//! −∂u/∂s + Au + (1/2λ)|∂u|² = F(x, m(s)),   u(x, T) = F_T(x, m(T))
//!  ∂m/∂s + Am − (1/λ)∂(m ∂u) = 0,           m(x, t) = m₀(x)
//! ```
//!
//! F(x, m) is the functional derivative ∂F/∂m(x). Nodes are centres of finite-volume
//! cells of width dx; the density has zero flux through the outer faces.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::ensemble::{ParticleEnsemble, PathLattice, TimeGrid};
use crate::error::{Error, Result};
use crate::fbsde::{lambda_t_for, GapTracker, Problem};
use crate::functionals::{eval_atoms, Atoms, Functional};
use crate::numeric::solve_tridiagonal;
use crate::value::{solve_value, ValueConfig};

pub const MIN_NODES: usize = 16;
/// Largest admissible max|∂u|·dt/(λ·dx).
pub const CFL_LIMIT: f64 = 0.9;
/// Courant limit of the limited upwind advection in the density update.
pub const FP_COURANT_LIMIT: f64 = 0.5;
/// Mass allowed in each outermost cell before the domain counts as too small.
pub const BOUNDARY_MASS_MAX: f64 = 1e-8;
pub const NEGATIVE_DENSITY_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid1D {
    pub x_min: f64,
    pub x_max: f64,
    pub nx: usize,
    pub dx: f64,
}

impl Grid1D {
    pub fn new(x_min: f64, x_max: f64, nx: usize) -> Result<Self> {
        if nx < MIN_NODES {
            return Err(Error::InvalidDimension(format!("grid needs at least {MIN_NODES} nodes, got {nx}")));
        }
        if !(x_min.is_finite() && x_max.is_finite() && x_max > x_min) {
            return Err(Error::InvalidArgument(format!("bad grid interval [{x_min}, {x_max}]")));
        }
        Ok(Grid1D { x_min, x_max, nx, dx: (x_max - x_min) / (nx - 1) as f64 })
    }

    /// Symmetric domain of ±`width` standard deviations around `center`.
    pub fn padded(center: f64, std: f64, width: f64, nx: usize) -> Result<Self> {
        Grid1D::new(center - width * std, center + width * std, nx)
    }

    pub fn x(&self, i: usize) -> f64 {
        if i == self.nx - 1 {
            return self.x_max;
        }
        self.x_min + i as f64 * self.dx
    }

    pub fn points(&self) -> Vec<f64> {
        (0..self.nx).map(|i| self.x(i)).collect()
    }

    /// Indices of the central half of the domain.
    pub fn interior(&self) -> std::ops::Range<usize> {
        let q = (self.nx - 1) / 4;
        q..self.nx - q
    }

    /// Linear interpolation, clamped to the domain.
    pub fn interpolate(&self, values: &[f64], x: f64) -> f64 {
        let s = ((x - self.x_min) / self.dx).clamp(0.0, (self.nx - 1) as f64);
        let i = (s.floor() as usize).min(self.nx - 2);
        let w = s - i as f64;
        (1.0 - w) * values[i] + w * values[i + 1]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DensityField {
    pub grid: Grid1D,
    pub time: TimeGrid,
    /// `values[k][i]` = m(x_i, s_k).
    pub values: Vec<Vec<f64>>,
    /// Σᵢ m(x_i, s_k)·dx per step.
    pub mass: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PotentialField {
    pub grid: Grid1D,
    pub time: TimeGrid,
    pub values: Vec<Vec<f64>>,
    /// Central-difference ∂u, second-order one-sided at the ends.
    pub gradient: Vec<Vec<f64>>,
}

fn mass_of(m: &[f64], dx: f64) -> f64 {
    crate::numeric::pairwise_sum(m) * dx
}

/// Trapezoid weights m_i·dx (halved at the ends).
fn quadrature_weights(m: &[f64], dx: f64) -> Vec<f64> {
    let last = m.len() - 1;
    m.iter()
        .enumerate()
        .map(|(i, v)| if i == 0 || i == last { 0.5 * v * dx } else { v * dx })
        .collect()
}

fn check_functional(f: &Functional) -> Result<()> {
    if f.dim != 1 {
        return Err(Error::DimensionUnsupported(format!("grid solver is one-dimensional, '{}' has dim {}", f.name, f.dim)));
    }
    Ok(())
}

/// Normalized density of N(mean, var) on the nodes.
pub fn gaussian_density(grid: &Grid1D, mean: f64, var: f64) -> Result<Vec<f64>> {
    if !(var > 0.0) {
        return Err(Error::InvalidArgument("variance must be positive".into()));
    }
    let raw: Vec<f64> = grid.points().iter().map(|x| (-(x - mean).powi(2) / (2.0 * var)).exp()).collect();
    normalize(raw, grid.dx)
}

/// Gaussian kernel density estimate of a 1D ensemble, normalized on the grid.
pub fn density_from_ensemble(grid: &Grid1D, x: &ParticleEnsemble, bandwidth: f64) -> Result<Vec<f64>> {
    if x.dim() != 1 {
        return Err(Error::DimensionUnsupported("density estimate needs a 1D ensemble".into()));
    }
    if !(bandwidth > 0.0) {
        return Err(Error::InvalidArgument("bandwidth must be positive".into()));
    }
    let pts = grid.points();
    let mut raw = vec![0.0; grid.nx];
    let reach = 8.0 * bandwidth;
    for &p in x.samples() {
        let lo = (((p - reach - grid.x_min) / grid.dx).floor().max(0.0)) as usize;
        let hi = ((((p + reach - grid.x_min) / grid.dx).ceil()).max(0.0) as usize).min(grid.nx - 1);
        for i in lo..=hi {
            raw[i] += (-(pts[i] - p).powi(2) / (2.0 * bandwidth * bandwidth)).exp();
        }
    }
    normalize(raw, grid.dx)
}

fn normalize(mut raw: Vec<f64>, dx: f64) -> Result<Vec<f64>> {
    let mass = mass_of(&raw, dx);
    if !(mass > 0.0 && mass.is_finite()) {
        return Err(Error::InvalidArgument("density has no mass on the grid".into()));
    }
    raw.iter_mut().for_each(|v| *v /= mass);
    Ok(raw)
}

/// F(x, m) = f(x, m) + ∫ ∂f(ξ, m)/∂m(x) m(ξ) dξ, with law statistics by trapezoid quadrature.
pub fn marginal_cost(f: &Functional, x: f64, m: &[f64], grid: &Grid1D) -> Result<f64> {
    Ok(marginal_cost_at(f, &[x], m, grid)?[0])
}

/// F(x_j, m) for several points at once.
pub fn marginal_cost_at(f: &Functional, xs: &[f64], m: &[f64], grid: &Grid1D) -> Result<Vec<f64>> {
    check_functional(f)?;
    if m.len() != grid.nx {
        return Err(Error::ShapeMismatch("density slice length differs from grid".into()));
    }
    let pts = grid.points();
    let w = quadrature_weights(m, grid.dx);
    let st = f.stats(Atoms { data: &pts, dim: 1, weights: Some(&w) });
    Ok(xs.iter().map(|&x| f.fun_deriv(&[x], &st)).collect())
}

/// F(m) = ∫ f(x, m) m(x) dx on the grid.
pub fn grid_functional(f: &Functional, m: &[f64], grid: &Grid1D) -> Result<f64> {
    check_functional(f)?;
    let pts = grid.points();
    let w = quadrature_weights(m, grid.dx);
    eval_atoms(f, Atoms { data: &pts, dim: 1, weights: Some(&w) })
}

fn check_time(time: &TimeGrid, problem: &Problem) -> Result<()> {
    if problem.spec.dim != 1 {
        return Err(Error::DimensionUnsupported(format!("grid solver is one-dimensional, problem has dim {}", problem.spec.dim)));
    }
    if (time.t_end - problem.spec.horizon.t_end).abs() > 1e-12 {
        return Err(Error::InvalidArgument("grid time horizon must end at T".into()));
    }
    Ok(())
}

fn diffusion_coefficient(problem: &Problem) -> f64 {
    problem.spec.diffusion()[0]
}

/// Central first derivative, second-order one-sided at the ends.
pub fn central_gradient(u: &[f64], dx: f64) -> Vec<f64> {
    let n = u.len();
    let mut g = vec![0.0; n];
    for i in 1..n - 1 {
        g[i] = (u[i + 1] - u[i - 1]) / (2.0 * dx);
    }
    g[0] = (-3.0 * u[0] + 4.0 * u[1] - u[2]) / (2.0 * dx);
    g[n - 1] = (3.0 * u[n - 1] - 4.0 * u[n - 2] + u[n - 3]) / (2.0 * dx);
    g
}

/// Godunov numerical Hamiltonian of p²/(2λ) with second-order one-sided slopes.
fn hamiltonian(u: &[f64], i: usize, dx: f64, lambda: f64) -> (f64, f64) {
    let n = u.len();
    let back = if i >= 2 { (3.0 * u[i] - 4.0 * u[i - 1] + u[i - 2]) / (2.0 * dx) } else { (u[i] - u[i - 1]) / dx };
    let fwd = if i + 2 < n { (-3.0 * u[i] + 4.0 * u[i + 1] - u[i + 2]) / (2.0 * dx) } else { (u[i + 1] - u[i]) / dx };
    let p = back.max(0.0).max(-fwd.min(0.0));
    (p * p / (2.0 * lambda), back.abs().max(fwd.abs()))
}

/// How the value at an end node is extrapolated from the interior.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum EndClosure {
    /// Vanishing third difference, exact for quadratics.
    Quadratic,
    /// Vanishing second difference. Used where the feedback drift leaves the domain,
    /// because the quadratic closure is unstable there.
    Linear,
}

/// Closure for an end whose outward slope is `outward_slope` (∂u·n).
fn closure_for(outward_slope: f64) -> EndClosure {
    if outward_slope < 0.0 {
        EndClosure::Linear
    } else {
        EndClosure::Quadratic
    }
}

/// End value from the three nearest interior values.
fn extrapolate(c: EndClosure, u1: f64, u2: f64, u3: f64) -> f64 {
    match c {
        EndClosure::Quadratic => 3.0 * u1 - 3.0 * u2 + u3,
        EndClosure::Linear => 2.0 * u1 - u2,
    }
}

/// Solve the constant-coefficient tridiagonal system on the interior nodes with the end
/// values eliminated through their closures.
fn solve_with_extrapolated_ends(sub: f64, diag: f64, sup: f64, rhs: &[f64], lo: EndClosure, hi: EndClosure) -> Result<Vec<f64>> {
    let n = rhs.len();
    let m = n - 2;
    let mut a = vec![sub; m];
    let mut b = vec![diag; m];
    let mut c = vec![sup; m];
    let mut r = rhs[1..n - 1].to_vec();
    // Row 1 holds sub·u₀; substitute u₀ and, for the quadratic closure, eliminate u₃ with row 2.
    match lo {
        EndClosure::Linear => {
            b[0] = diag + 2.0 * sub;
            c[0] = sup - sub;
        }
        EndClosure::Quadratic if sup == 0.0 => {}
        EndClosure::Quadratic => {
            b[0] = diag + 3.0 * sub - sub * sub / sup;
            c[0] = sup - 3.0 * sub - sub * diag / sup;
            r[0] = rhs[1] - sub * rhs[2] / sup;
        }
    }
    match hi {
        EndClosure::Linear => {
            b[m - 1] = diag + 2.0 * sup;
            a[m - 1] = sub - sup;
        }
        EndClosure::Quadratic if sub == 0.0 => {}
        EndClosure::Quadratic => {
            b[m - 1] = diag + 3.0 * sup - sup * sup / sub;
            a[m - 1] = sub - 3.0 * sup - sup * diag / sub;
            r[m - 1] = rhs[n - 2] - sup * rhs[n - 3] / sub;
        }
    }
    a[0] = 0.0;
    c[m - 1] = 0.0;
    solve_tridiagonal(&a, &b, &c, &mut r);
    let mut u = Vec::with_capacity(n);
    u.push(extrapolate(lo, r[0], r[1], r[2]));
    u.extend_from_slice(&r);
    u.push(extrapolate(hi, r[m - 1], r[m - 2], r[m - 3]));
    Ok(u)
}

/// Backward semi-implicit stepping of the HJB equation with the density flow frozen.
pub fn solve_hjb(problem: &Problem, m_flow: &DensityField) -> Result<PotentialField> {
    let grid = m_flow.grid;
    let time = m_flow.time;
    check_time(&time, problem)?;
    check_functional(&problem.running)?;
    check_functional(&problem.terminal)?;
    let nt = time.n_steps;
    let dt = time.dt();
    let dx = grid.dx;
    let lam = problem.spec.lambda;
    let a = diffusion_coefficient(problem);
    let pts = grid.points();
    let r = 0.5 * a * dt / (dx * dx);
    let mut values = vec![Vec::new(); nt + 1];
    values[nt] = marginal_cost_at(&problem.terminal, &pts, &m_flow.values[nt], &grid)?;
    for k in (0..nt).rev() {
        let next = &values[k + 1];
        let f = if problem.running.is_zero() { vec![0.0; grid.nx] } else { marginal_cost_at(&problem.running, &pts, &m_flow.values[k], &grid)? };
        let mut rhs = vec![0.0; grid.nx];
        for i in 1..grid.nx - 1 {
            let (h, slope) = hamiltonian(next, i, dx, lam);
            if slope * dt / (lam * dx) > CFL_LIMIT {
                return Err(Error::Cfl(format!(
                    "max|Du|·dt/(λ·dx) = {:.3} exceeds {CFL_LIMIT} at step {k}",
                    slope * dt / (lam * dx)
                )));
            }
            rhs[i] = next[i] - dt * h + dt * f[i];
        }
        let n = grid.nx;
        let lo = closure_for(-(next[1] - next[0]) / dx);
        let hi = closure_for((next[n - 1] - next[n - 2]) / dx);
        let u = solve_with_extrapolated_ends(-r, 1.0 + 2.0 * r, -r, &rhs, lo, hi)?;
        if u.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericalOverflow(format!("HJB solution not finite at step {k}")));
        }
        values[k] = u;
    }
    let gradient = values.iter().map(|u| central_gradient(u, dx)).collect();
    Ok(PotentialField { grid, time, values, gradient })
}

fn minmod(a: f64, b: f64) -> f64 {
    if a * b <= 0.0 {
        0.0
    } else if a.abs() < b.abs() {
        a
    } else {
        b
    }
}

/// Limited reconstruction of cell `i` at its face in direction `dir` (±1).
fn upwind_face(m: &[f64], i: usize, dir: i32) -> f64 {
    if i == 0 || i + 1 == m.len() {
        return m[i];
    }
    let slope = minmod(m[i] - m[i - 1], m[i + 1] - m[i]);
    m[i] + 0.5 * dir as f64 * slope
}

/// Forward conservative stepping of the Fokker-Planck equation driven by the feedback
/// −∂u/λ: explicit upwind advection with minmod-limited slopes, implicit diffusion,
/// zero flux at the outer faces.
pub fn solve_fp(problem: &Problem, u: &PotentialField, m0: &[f64]) -> Result<DensityField> {
    fp_steps(problem, u, m0, true)
}

fn fp_steps(problem: &Problem, u: &PotentialField, m0: &[f64], check_leak: bool) -> Result<DensityField> {
    let grid = u.grid;
    let time = u.time;
    check_time(&time, problem)?;
    let nx = grid.nx;
    if m0.len() != nx {
        return Err(Error::ShapeMismatch("initial density length differs from grid".into()));
    }
    if m0.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
        return Err(Error::InvalidArgument("initial density must be finite and non-negative".into()));
    }
    let m0_mass = mass_of(m0, grid.dx);
    if (m0_mass - 1.0).abs() > 1e-10 {
        return Err(Error::InvalidArgument(format!("initial density has mass {m0_mass}, expected 1")));
    }
    let nt = time.n_steps;
    let dt = time.dt();
    let dx = grid.dx;
    let lam = problem.spec.lambda;
    let a = diffusion_coefficient(problem);
    let r = 0.5 * a * dt / (dx * dx);
    let mut sub = vec![-r; nx];
    let mut diag = vec![1.0 + 2.0 * r; nx];
    let mut sup = vec![-r; nx];
    sub[0] = 0.0;
    sup[nx - 1] = 0.0;
    diag[0] = 1.0 + r;
    diag[nx - 1] = 1.0 + r;
    let mut values = Vec::with_capacity(nt + 1);
    let mut mass = Vec::with_capacity(nt + 1);
    values.push(m0.to_vec());
    mass.push(m0_mass);
    let mut flux = vec![0.0; nx + 1];
    for k in 0..nt {
        let m = &values[k];
        let uk = &u.values[k];
        for i in 0..nx - 1 {
            let b = -(uk[i + 1] - uk[i]) / (dx * lam);
            if b.abs() * dt / dx > FP_COURANT_LIMIT {
                return Err(Error::Cfl(format!("FP advection Courant number {:.3} at step {k}", b.abs() * dt / dx)));
            }
            flux[i + 1] = if b > 0.0 { b * upwind_face(m, i, 1) } else { b * upwind_face(m, i + 1, -1) };
        }
        let mut next: Vec<f64> = (0..nx).map(|i| m[i] - dt / dx * (flux[i + 1] - flux[i])).collect();
        solve_tridiagonal(&sub, &diag, &sup, &mut next);
        let lowest = next.iter().cloned().fold(f64::INFINITY, f64::min);
        if lowest < -NEGATIVE_DENSITY_TOL || !lowest.is_finite() {
            return Err(Error::SchemeFailure(format!("density {lowest:e} below zero at step {}", k + 1)));
        }
        let edge = next[0].max(next[nx - 1]) * dx;
        if check_leak && edge > BOUNDARY_MASS_MAX {
            return Err(Error::SchemeFailure(format!("boundary cell mass {edge:e} at step {}: domain too small", k + 1)));
        }
        mass.push(mass_of(&next, dx));
        values.push(next);
    }
    Ok(DensityField { grid, time, values, mass })
}

impl DensityField {
    /// m(s) = m₀ for all s.
    pub fn constant(grid: Grid1D, time: TimeGrid, m0: &[f64]) -> Self {
        let mass = mass_of(m0, grid.dx);
        DensityField { grid, time, values: vec![m0.to_vec(); time.n_steps + 1], mass: vec![mass; time.n_steps + 1] }
    }

    /// max over steps of |mass(s_k) − mass(s_{k−1})|.
    pub fn max_mass_drift(&self) -> f64 {
        self.mass.windows(2).map(|w| (w[1] - w[0]).abs()).fold(0.0, f64::max)
    }

    pub fn min_value(&self) -> f64 {
        self.values.iter().flatten().cloned().fold(f64::INFINITY, f64::min)
    }

    /// ∫x m(x, s_k) dx and ∫(x − mean)² m(x, s_k) dx.
    pub fn moments(&self, k: usize) -> (f64, f64) {
        let pts = self.grid.points();
        let m = &self.values[k];
        let mass = self.mass[k];
        let mean = pts.iter().zip(m).map(|(x, v)| x * v).sum::<f64>() * self.grid.dx / mass;
        let var = pts.iter().zip(m).map(|(x, v)| (x - mean).powi(2) * v).sum::<f64>() * self.grid.dx / mass;
        (mean, var)
    }

    /// sup over steps of ∫|m − m′| dx.
    pub fn l1_gap(&self, other: &DensityField) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() * self.grid.dx)
            .fold(0.0, f64::max)
    }

    fn blend(&self, theta: f64, other: &DensityField) -> DensityField {
        let values: Vec<Vec<f64>> = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (1.0 - theta) * x + theta * y).collect())
            .collect();
        let mass = values.iter().map(|m| mass_of(m, self.grid.dx)).collect();
        DensityField { grid: self.grid, time: self.time, values, mass }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FixedPointConfig {
    /// Weight of the new density flow in each update.
    pub damping: f64,
    pub tol: f64,
    pub max_iters: usize,
    pub divergence_window: usize,
    pub check_admission: bool,
}

impl Default for FixedPointConfig {
    fn default() -> Self {
        FixedPointConfig { damping: 0.5, tol: 1e-10, max_iters: 200, divergence_window: 5, check_admission: true }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridSolution {
    pub u: PotentialField,
    pub m: DensityField,
    pub iterations: usize,
    pub final_gap: f64,
    pub gap_history: Vec<f64>,
}

impl GridSolution {
    /// Grid cost of the optimal feedback:
    /// (1/2λ)∫∫|∂u|²m dx ds + ∫F(m(s)) ds + F_T(m(T)), left-point rule in time.
    pub fn cost(&self, problem: &Problem) -> Result<f64> {
        let grid = self.m.grid;
        let dt = self.m.time.dt();
        let lam = problem.spec.lambda;
        let mut v = 0.0;
        for k in 0..self.m.time.n_steps {
            let m = &self.m.values[k];
            let g = &self.u.gradient[k];
            v += dt / (2.0 * lam) * g.iter().zip(m).map(|(p, w)| p * p * w).sum::<f64>() * grid.dx;
            if !problem.running.is_zero() {
                v += dt * grid_functional(&problem.running, m, &grid)?;
            }
        }
        Ok(v + grid_functional(&problem.terminal, &self.m.values[self.m.time.n_steps], &grid)?)
    }
}

/// Alternate HJB and FP solves with a damped density flow until the sup-step L¹ gap
/// falls below `tol`. Starts from the free flow m = FP(u ≡ 0).
pub fn fixed_point(problem: &Problem, m0: &[f64], grid: Grid1D, time: TimeGrid, cfg: &FixedPointConfig) -> Result<GridSolution> {
    if !(cfg.damping > 0.0 && cfg.damping <= 1.0) {
        return Err(Error::InvalidArgument("damping must be in (0, 1]".into()));
    }
    if !(cfg.tol > 0.0) || cfg.max_iters == 0 || cfg.divergence_window == 0 {
        return Err(Error::InvalidArgument("tol, max_iters and divergence_window must be positive".into()));
    }
    check_time(&time, problem)?;
    let lt = lambda_t_for(problem, time);
    if cfg.check_admission && lt <= 0.0 {
        return Err(Error::AdmissionRejected(lt));
    }
    let zero = PotentialField {
        grid,
        time,
        values: vec![vec![0.0; grid.nx]; time.n_steps + 1],
        gradient: vec![vec![0.0; grid.nx]; time.n_steps + 1],
    };
    // The uncontrolled flow only seeds the iteration, so it may spread wider than
    // the domain is sized for.
    let mut flow = fp_steps(problem, &zero, m0, false)?;
    let mut tracker = GapTracker::new(cfg.divergence_window);
    for iter in 1..=cfg.max_iters {
        let u = solve_hjb(problem, &flow)?;
        let next = solve_fp(problem, &u, m0)?;
        let gap = next.l1_gap(&flow);
        tracker.push(gap)?;
        if gap <= cfg.tol {
            return Ok(GridSolution { u, m: next, iterations: iter, final_gap: gap, gap_history: tracker.history });
        }
        flow = flow.blend(cfg.damping, &next);
    }
    Err(Error::MaxItersExceeded { iters: cfg.max_iters, gap: *tracker.history.last().unwrap_or(&f64::NAN) })
}

/// Replace a fraction ε of the particles of X by those of X′: an ensemble with law
/// (1−ε)m + εm′ sharing the rest of X.
#[derive(Debug, Clone, PartialEq)]
pub struct Mixture {
    pub mixed: ParticleEnsemble,
    pub replacement: ParticleEnsemble,
    pub replaced: Vec<usize>,
    /// Realized fraction |replaced|/N.
    pub eps: f64,
}

pub fn mixture(x: &ParticleEnsemble, replacement: &ParticleEnsemble, eps: f64, seed: u64) -> Result<Mixture> {
    x.check_shape(replacement)?;
    if !(0.0..=1.0).contains(&eps) {
        return Err(Error::InvalidArgument("mixture fraction must be in [0, 1]".into()));
    }
    let n = x.n_particles();
    let count = (eps * n as f64).round() as usize;
    let mut replaced: Vec<usize> = crate::rng::permutation(n, seed).into_iter().take(count).collect();
    replaced.sort_unstable();
    let mut mixed = x.clone();
    for &i in &replaced {
        mixed.particle_mut(i).copy_from_slice(replacement.particle(i));
    }
    Ok(Mixture { mixed, replacement: replacement.clone(), replaced, eps: count as f64 / n as f64 })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CrossValidation {
    /// sup over bulk particles of |D_X V entry − ∂u(Xᵢ, t)| / (1 + |Xᵢ|).
    pub gradient_gap: f64,
    pub bulk_particles: usize,
    /// [V(m_ε) − V(m)]/ε from the particle solver.
    pub weak_derivative_particle: f64,
    /// ∫u(x, t)(m′ − m)(dx) over the replaced particles.
    pub weak_derivative_grid: f64,
    pub weak_derivative_gap: f64,
    pub value_particle: f64,
    pub value_grid: f64,
    pub value_gap: f64,
}

fn relative_gap(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / a.abs().max(b.abs())
    }
}

/// Compare the particle solution on `lattice` with the grid solution.
/// `bulk_radius` bounds |Xᵢ − mean| for the gradient comparison.
pub fn cross_validate(
    problem: &Problem,
    x: &ParticleEnsemble,
    lattice: &PathLattice,
    cfg: &ValueConfig,
    grid: &GridSolution,
    mix: Option<&Mixture>,
    bulk_radius: f64,
) -> Result<CrossValidation> {
    if problem.spec.dim != 1 || x.dim() != 1 {
        return Err(Error::DimensionUnsupported("cross-validation is one-dimensional".into()));
    }
    if (grid.u.time.t_start - lattice.grid.t_start).abs() > 1e-12 {
        return Err(Error::InvalidArgument("grid and lattice start at different times".into()));
    }
    let cfg = ValueConfig { with_probe: false, ..*cfg };
    let (rep, _) = solve_value(problem, x, lattice, &cfg)?;
    let g = &grid.u.grid;
    let du0 = &grid.u.gradient[0];
    let u0 = &grid.u.values[0];
    let center = x.mean_vector()[0];
    let mut gradient_gap: f64 = 0.0;
    let mut bulk = 0;
    for i in 0..x.n_particles() {
        let xi = x.particle(i)[0];
        if (xi - center).abs() <= bulk_radius {
            bulk += 1;
            let gap = (rep.gradient.particle(i)[0] - g.interpolate(du0, xi)).abs() / (1.0 + xi.abs());
            gradient_gap = gradient_gap.max(gap);
        }
    }
    let (wp, wg) = match mix {
        Some(mx) if !mx.replaced.is_empty() => {
            let v_eps = solve_value(problem, &mx.mixed, lattice, &cfg)?.0.value;
            let n = x.n_particles() as f64;
            let grid_side: f64 = mx
                .replaced
                .iter()
                .map(|&i| g.interpolate(u0, mx.replacement.particle(i)[0]) - g.interpolate(u0, x.particle(i)[0]))
                .sum::<f64>()
                / n
                / mx.eps;
            ((v_eps - rep.value) / mx.eps, grid_side)
        }
        _ => (0.0, 0.0),
    };
    let value_grid = grid.cost(problem)?;
    Ok(CrossValidation {
        gradient_gap,
        bulk_particles: bulk,
        weak_derivative_particle: wp,
        weak_derivative_grid: wg,
        weak_derivative_gap: relative_gap(wp, wg),
        value_particle: rep.value,
        value_grid,
        value_gap: relative_gap(rep.value, value_grid),
    })
}

/// CSV table `x,s,m,u,du` of a grid solution.
pub fn write_fields_csv<W: Write>(sol: &GridSolution, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| Error::Io(e.to_string());
    w.write_record(["x", "s", "m", "u", "du"]).map_err(io)?;
    let pts = sol.u.grid.points();
    for k in 0..=sol.u.time.n_steps {
        let s = sol.u.time.time(k);
        for (i, x) in pts.iter().enumerate() {
            w.write_record(&[
                format!("{x:.17e}"),
                format!("{s:.17e}"),
                format!("{:.17e}", sol.m.values[k][i]),
                format!("{:.17e}", sol.u.values[k][i]),
                format!("{:.17e}", sol.u.gradient[k][i]),
            ])
            .map_err(io)?;
        }
    }
    w.flush().map_err(|e| Error::Io(e.to_string()))
}
