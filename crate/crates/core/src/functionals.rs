//! Law-dependent cost functionals F(m) = ∫ f(x, m) m(dx), their lifted
//! derivatives on H, functional-derivative oracles, and regularity constants.
//!
//! Catalog:
//! * `zero`: F ≡ 0.
//! * `quadratic`: f(x, m) = ½ x·Qx + b·x + x·S x̄ + κ|x − x̄|², x̄ the mean of m.
//! * `stress`: F(m) = α E[Σ_c cos X_c] + (β/2)|E sin X|² − (γ/2) E|X|², smooth and
//!   non-convex for α, γ > 0.
//!
//! For the quadratic family D_X F(X) = sym(Q)X + b + (S + Sᵀ)E[X] + 2κ(X − E[X])
//! and Γ(X)Z = AZ + M E[Z] with A = sym(Q) + 2κI, M = S + Sᵀ − 2κI.

use serde::{Deserialize, Serialize};

use crate::ensemble::{h_inner, independent_copy, ParticleEnsemble, TimeGrid};
use crate::error::{Error, Result};
use crate::numeric::{mat_vec, pairwise_sum_by, spectral_norm, sym_eigenvalues};
use crate::rng;

/// Problem data shared by every solver: control weight, noise matrix and horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct ProblemSpec {
    pub lambda: f64,
    /// Row-major `dim x dim`.
    pub sigma: Vec<f64>,
    pub dim: usize,
    pub horizon: TimeGrid,
}

impl ProblemSpec {
    pub fn new(lambda: f64, sigma: Vec<f64>, dim: usize, horizon: TimeGrid) -> Result<Self> {
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(Error::InvalidArgument(format!("lambda must be positive, got {lambda}")));
        }
        if dim == 0 {
            return Err(Error::InvalidDimension("dim must be >= 1".into()));
        }
        if sigma.len() != dim * dim {
            return Err(Error::ShapeMismatch(format!("sigma has {} entries, need {}", sigma.len(), dim * dim)));
        }
        if sigma.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("sigma entries must be finite".into()));
        }
        Ok(ProblemSpec { lambda, sigma, dim, horizon })
    }

    /// σ = s0·I.
    pub fn isotropic(lambda: f64, s0: f64, dim: usize, horizon: TimeGrid) -> Result<Self> {
        let mut sigma = vec![0.0; dim * dim];
        for c in 0..dim {
            sigma[c * dim + c] = s0;
        }
        Self::new(lambda, sigma, dim, horizon)
    }

    pub fn is_noiseless(&self) -> bool {
        self.sigma.iter().all(|&v| v == 0.0)
    }

    /// Same data on a different horizon.
    pub fn with_horizon(&self, horizon: TimeGrid) -> ProblemSpec {
        ProblemSpec { horizon, ..self.clone() }
    }

    /// σ applied to every particle of `w`.
    pub fn apply_sigma(&self, w: &ParticleEnsemble) -> ParticleEnsemble {
        let d = self.dim;
        let mut out = ParticleEnsemble::zeros(w.n_particles(), d);
        for i in 0..w.n_particles() {
            mat_vec(&self.sigma, w.particle(i), out.particle_mut(i));
        }
        out
    }

    /// a = σσᵀ, row-major.
    pub fn diffusion(&self) -> Vec<f64> {
        let d = self.dim;
        let mut a = vec![0.0; d * d];
        for r in 0..d {
            for c in 0..d {
                a[r * d + c] = (0..d).map(|k| self.sigma[r * d + k] * self.sigma[c * d + k]).sum();
            }
        }
        a
    }
}

/// Regularity constants of one functional.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Regularity {
    /// Lipschitz constant of the lifted gradient.
    pub lipschitz: f64,
    /// Quasi-convexity constant: ((D F(X₁) − D F(X₂), X₁ − X₂)) ≥ −c′‖X₁ − X₂‖².
    pub quasi_convexity: f64,
    /// Hölder exponent of the second derivative.
    pub delta: f64,
}

/// Constants for the pair (F, F_T) entering the admission test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FunctionalBounds {
    pub c: f64,
    pub c_t: f64,
    pub c_prime: f64,
    pub c_t_prime: f64,
    pub delta: f64,
}

impl FunctionalBounds {
    pub fn new(c: f64, c_t: f64, c_prime: f64, c_t_prime: f64, delta: f64) -> Result<Self> {
        if c < 0.0 || c_t < 0.0 {
            return Err(Error::InvalidArgument("Lipschitz constants must be >= 0".into()));
        }
        if !(delta > 0.0 && delta <= 1.0) {
            return Err(Error::InvalidArgument(format!("delta must be in (0, 1], got {delta}")));
        }
        Ok(FunctionalBounds { c, c_t, c_prime, c_t_prime, delta })
    }

    pub fn from_pair(running: &Functional, terminal: &Functional) -> Self {
        let r = running.regularity();
        let t = terminal.regularity();
        FunctionalBounds {
            c: r.lipschitz,
            c_t: t.lipschitz,
            c_prime: r.quasi_convexity,
            c_t_prime: t.quasi_convexity,
            delta: r.delta.min(t.delta),
        }
    }
}

/// λ_T = λ − c′T − c′_T T²/2 with T the remaining horizon.
pub fn lambda_t(spec: &ProblemSpec, bounds: &FunctionalBounds) -> f64 {
    let t = spec.horizon.horizon();
    spec.lambda - bounds.c_prime * t - bounds.c_t_prime * t * t / 2.0
}

/// How the mixed (cross-particle) term of the Hessian action is evaluated. Struct
/// variants so that stray keys in a config are rejected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", deny_unknown_fields)]
pub enum MixedTerm {
    /// Exact, using the product structure of the kernel (O(N)).
    Factorized {},
    /// One seeded permutation pairing (X, X̃) as the independent copy.
    IndependentCopy { seed: u64 },
    /// Full double average over particle pairs, O(N²), N ≤ 1024.
    DoubleSum {},
}

impl Default for MixedTerm {
    fn default() -> Self {
        MixedTerm::Factorized {}
    }
}

pub const DOUBLE_SUM_MAX: usize = 1024;

#[derive(Debug, Clone, PartialEq)]
pub enum FunctionalKind {
    Zero,
    Quadratic { q: Vec<f64>, b: Vec<f64>, s: Vec<f64>, kappa: f64 },
    Stress { alpha: f64, beta: f64, gamma: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Functional {
    pub name: String,
    pub dim: usize,
    pub kind: FunctionalKind,
    pub mixed: MixedTerm,
    /// Declared constants; when absent they are derived from the closed form.
    pub declared: Option<Regularity>,
}

/// Law statistics a functional needs to evaluate its per-point pieces.
#[derive(Debug, Clone, PartialEq)]
pub struct LawStats {
    pub mean: Vec<f64>,
    pub sin_mean: Vec<f64>,
}

/// Weighted atoms: ensembles use uniform weights, grids carry quadrature weights.
#[derive(Debug, Clone, Copy)]
pub struct Atoms<'a> {
    pub data: &'a [f64],
    pub dim: usize,
    pub weights: Option<&'a [f64]>,
}

impl<'a> Atoms<'a> {
    pub fn of(x: &'a ParticleEnsemble) -> Self {
        Atoms { data: x.samples(), dim: x.dim(), weights: None }
    }
    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
    pub fn point(&self, i: usize) -> &'a [f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
    /// Σᵢ wᵢ g(i) with pairwise summation.
    pub fn expect(&self, g: impl Fn(usize) -> f64) -> f64 {
        match self.weights {
            Some(w) => pairwise_sum_by(self.len(), |i| w[i] * g(i)),
            None => pairwise_sum_by(self.len(), &g) / self.len() as f64,
        }
    }
}

impl Functional {
    pub fn zero(dim: usize) -> Self {
        Functional { name: "zero".into(), dim, kind: FunctionalKind::Zero, mixed: MixedTerm::default(), declared: None }
    }

    /// f = ½|x|² scaled by `weight`.
    pub fn half_square(dim: usize, weight: f64) -> Self {
        let mut q = vec![0.0; dim * dim];
        for c in 0..dim {
            q[c * dim + c] = weight;
        }
        Functional::quadratic(dim, q, vec![0.0; dim], vec![0.0; dim * dim], 0.0).expect("valid shapes")
    }

    pub fn quadratic(dim: usize, q: Vec<f64>, b: Vec<f64>, s: Vec<f64>, kappa: f64) -> Result<Self> {
        if q.len() != dim * dim || s.len() != dim * dim || b.len() != dim {
            return Err(Error::ShapeMismatch("quadratic functional parameter shapes".into()));
        }
        if q.iter().chain(&b).chain(&s).any(|v| !v.is_finite()) || !kappa.is_finite() {
            return Err(Error::InvalidArgument("quadratic functional parameters must be finite".into()));
        }
        Ok(Functional {
            name: "quadratic".into(),
            dim,
            kind: FunctionalKind::Quadratic { q, b, s, kappa },
            mixed: MixedTerm::default(),
            declared: None,
        })
    }

    pub fn stress(dim: usize, alpha: f64, beta: f64, gamma: f64) -> Result<Self> {
        if ![alpha, beta, gamma].iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidArgument("stress parameters must be finite".into()));
        }
        Ok(Functional {
            name: "stress".into(),
            dim,
            kind: FunctionalKind::Stress { alpha, beta, gamma },
            mixed: MixedTerm::default(),
            declared: None,
        })
    }

    pub fn with_mixed(mut self, mixed: MixedTerm) -> Self {
        self.mixed = mixed;
        self
    }

    pub fn with_declared(mut self, r: Regularity) -> Self {
        self.declared = Some(r);
        self
    }

    pub fn is_zero(&self) -> bool {
        matches!(self.kind, FunctionalKind::Zero)
    }

    pub fn has_third_derivative(&self) -> bool {
        true
    }

    /// Regularity constants derived from the closed form.
    pub fn derived_regularity(&self) -> Regularity {
        let d = self.dim;
        match &self.kind {
            FunctionalKind::Zero => Regularity { lipschitz: 0.0, quasi_convexity: 0.0, delta: 1.0 },
            FunctionalKind::Quadratic { .. } => {
                let (a, m) = self.quadratic_operators().unwrap();
                let apm: Vec<f64> = a.iter().zip(&m).map(|(x, y)| x + y).collect();
                let lip = spectral_norm(&a, d) + spectral_norm(&m, d);
                let lo = sym_eigenvalues(&a, d)[0].min(sym_eigenvalues(&apm, d)[0]);
                Regularity { lipschitz: lip, quasi_convexity: (-lo).max(0.0), delta: 1.0 }
            }
            FunctionalKind::Stress { alpha, beta, gamma } => Regularity {
                lipschitz: alpha.abs() + 2.0 * beta.abs() + gamma.abs(),
                quasi_convexity: alpha.abs() + beta.abs() + gamma.max(0.0) + (-beta).max(0.0),
                delta: 1.0,
            },
        }
    }

    pub fn regularity(&self) -> Regularity {
        self.declared.unwrap_or_else(|| self.derived_regularity())
    }

    /// (A, M) with Γ(X)Z = AZ + M E[Z] for the quadratic family.
    fn quadratic_operators(&self) -> Option<(Vec<f64>, Vec<f64>)> {
        let d = self.dim;
        if let FunctionalKind::Quadratic { q, s, kappa, .. } = &self.kind {
            let mut a = vec![0.0; d * d];
            let mut m = vec![0.0; d * d];
            for r in 0..d {
                for c in 0..d {
                    let eye = if r == c { 1.0 } else { 0.0 };
                    a[r * d + c] = 0.5 * (q[r * d + c] + q[c * d + r]) + 2.0 * kappa * eye;
                    m[r * d + c] = s[r * d + c] + s[c * d + r] - 2.0 * kappa * eye;
                }
            }
            Some((a, m))
        } else {
            None
        }
    }

    pub fn stats(&self, atoms: Atoms) -> LawStats {
        let d = atoms.dim;
        match &self.kind {
            FunctionalKind::Zero => LawStats { mean: vec![], sin_mean: vec![] },
            FunctionalKind::Quadratic { .. } => LawStats {
                mean: (0..d).map(|c| atoms.expect(|i| atoms.data[i * d + c])).collect(),
                sin_mean: vec![],
            },
            FunctionalKind::Stress { .. } => LawStats {
                mean: vec![],
                sin_mean: (0..d).map(|c| atoms.expect(|i| atoms.data[i * d + c].sin())).collect(),
            },
        }
    }

    /// f(x, m).
    pub fn integrand(&self, x: &[f64], st: &LawStats) -> f64 {
        let d = self.dim;
        match &self.kind {
            FunctionalKind::Zero => 0.0,
            FunctionalKind::Quadratic { q, b, s, kappa } => {
                let mut qx = vec![0.0; d];
                mat_vec(q, x, &mut qx);
                let mut sm = vec![0.0; d];
                mat_vec(s, &st.mean, &mut sm);
                let dev: f64 = x.iter().zip(&st.mean).map(|(a, m)| (a - m).powi(2)).sum();
                0.5 * dot(x, &qx) + dot(b, x) + dot(x, &sm) + kappa * dev
            }
            FunctionalKind::Stress { alpha, beta, gamma } => {
                let mut v = 0.0;
                for c in 0..d {
                    v += alpha * x[c].cos() + 0.5 * beta * st.sin_mean[c] * x[c].sin() - 0.5 * gamma * x[c] * x[c];
                }
                v
            }
        }
    }

    /// ∂F/∂m(m)(x), normalized by the catalog's closed form.
    pub fn fun_deriv(&self, x: &[f64], st: &LawStats) -> f64 {
        let d = self.dim;
        match &self.kind {
            FunctionalKind::Zero => 0.0,
            FunctionalKind::Quadratic { q, b, s, kappa } => {
                let mut qx = vec![0.0; d];
                mat_vec(q, x, &mut qx);
                let mut v = 0.5 * dot(x, &qx) + dot(b, x) + kappa * x.iter().zip(&st.mean).map(|(a, m)| (a - m).powi(2)).sum::<f64>();
                for r in 0..d {
                    for c in 0..d {
                        v += x[r] * (s[r * d + c] + s[c * d + r]) * st.mean[c];
                    }
                }
                v
            }
            FunctionalKind::Stress { alpha, beta, gamma } => {
                let mut v = 0.0;
                for c in 0..d {
                    v += alpha * x[c].cos() + beta * st.sin_mean[c] * x[c].sin() - 0.5 * gamma * x[c] * x[c];
                }
                v
            }
        }
    }

    /// ∂²F/∂m²(m)(x₁, x₂), up to functions of a single argument.
    pub fn fun_deriv2(&self, x1: &[f64], x2: &[f64], st: &LawStats) -> f64 {
        let d = self.dim;
        match &self.kind {
            FunctionalKind::Zero => 0.0,
            FunctionalKind::Quadratic { s, kappa, .. } => {
                let mut v = 0.0;
                for r in 0..d {
                    for c in 0..d {
                        v += x1[r] * (s[r * d + c] + s[c * d + r]) * x2[c];
                    }
                    v -= 2.0 * kappa * (x1[r] - st.mean[r]) * x2[r];
                }
                v
            }
            FunctionalKind::Stress { beta, .. } => (0..d).map(|c| beta * x1[c].sin() * x2[c].sin()).sum(),
        }
    }

    /// D_x ∂F/∂m(m)(x).
    pub fn grad_point(&self, x: &[f64], st: &LawStats, out: &mut [f64]) {
        let d = self.dim;
        match &self.kind {
            FunctionalKind::Zero => out.iter_mut().for_each(|v| *v = 0.0),
            FunctionalKind::Quadratic { q, b, s, kappa } => {
                for r in 0..d {
                    let mut v = b[r] + 2.0 * kappa * (x[r] - st.mean[r]);
                    for c in 0..d {
                        v += 0.5 * (q[r * d + c] + q[c * d + r]) * x[c];
                        v += (s[r * d + c] + s[c * d + r]) * st.mean[c];
                    }
                    out[r] = v;
                }
            }
            FunctionalKind::Stress { alpha, beta, gamma } => {
                for c in 0..d {
                    out[c] = -alpha * x[c].sin() + beta * st.sin_mean[c] * x[c].cos() - gamma * x[c];
                }
            }
        }
    }

    /// D²_x ∂F/∂m(m)(x) z.
    fn hess_local_point(&self, x: &[f64], st: &LawStats, z: &[f64], out: &mut [f64]) {
        let d = self.dim;
        match &self.kind {
            FunctionalKind::Zero => out.iter_mut().for_each(|v| *v = 0.0),
            FunctionalKind::Quadratic { q, kappa, .. } => {
                for r in 0..d {
                    let mut v = 2.0 * kappa * z[r];
                    for c in 0..d {
                        v += 0.5 * (q[r * d + c] + q[c * d + r]) * z[c];
                    }
                    out[r] = v;
                }
            }
            FunctionalKind::Stress { alpha, beta, gamma } => {
                for c in 0..d {
                    out[c] = (-alpha * x[c].cos() - beta * st.sin_mean[c] * x[c].sin() - gamma) * z[c];
                }
            }
        }
    }

    /// `out += K(x, x̃) z̃` with K = D_x D_x̃ ∂²F/∂m².
    fn mixed_kernel_add(&self, x: &[f64], xt: &[f64], zt: &[f64], scale: f64, out: &mut [f64]) {
        let d = self.dim;
        match &self.kind {
            FunctionalKind::Zero => {}
            FunctionalKind::Quadratic { .. } => {
                let (_, m) = self.quadratic_operators().unwrap();
                for r in 0..d {
                    for c in 0..d {
                        out[r] += scale * m[r * d + c] * zt[c];
                    }
                }
            }
            FunctionalKind::Stress { beta, .. } => {
                for c in 0..d {
                    out[c] += scale * beta * x[c].cos() * xt[c].cos() * zt[c];
                }
            }
        }
    }

    /// Aggregate of the direction that the factorized mixed term needs.
    fn mixed_aggregate(&self, x: Atoms, z: &[f64]) -> Vec<f64> {
        let d = self.dim;
        match &self.kind {
            FunctionalKind::Zero => vec![],
            FunctionalKind::Quadratic { .. } => (0..d).map(|c| x.expect(|i| z[i * d + c])).collect(),
            FunctionalKind::Stress { .. } => {
                (0..d).map(|c| x.expect(|i| x.data[i * d + c].cos() * z[i * d + c])).collect()
            }
        }
    }

    fn mixed_apply(&self, x: &[f64], agg: &[f64], out: &mut [f64]) {
        let d = self.dim;
        match &self.kind {
            FunctionalKind::Zero => {}
            FunctionalKind::Quadratic { .. } => {
                let (_, m) = self.quadratic_operators().unwrap();
                for r in 0..d {
                    for c in 0..d {
                        out[r] += m[r * d + c] * agg[c];
                    }
                }
            }
            FunctionalKind::Stress { beta, .. } => {
                for c in 0..d {
                    out[c] += beta * x[c].cos() * agg[c];
                }
            }
        }
    }

    /// Mixed part of B from two aggregates.
    fn mixed_bilinear(&self, agg_y: &[f64], agg_z: &[f64]) -> f64 {
        let d = self.dim;
        match &self.kind {
            FunctionalKind::Zero => 0.0,
            FunctionalKind::Quadratic { .. } => {
                let (_, m) = self.quadratic_operators().unwrap();
                let mut v = 0.0;
                for r in 0..d {
                    for c in 0..d {
                        v += agg_y[r] * m[r * d + c] * agg_z[c];
                    }
                }
                v
            }
            FunctionalKind::Stress { beta, .. } => (0..d).map(|c| beta * agg_y[c] * agg_z[c]).sum(),
        }
    }

    fn check_dim(&self, x: &ParticleEnsemble) -> Result<()> {
        if x.dim() != self.dim {
            return Err(Error::ShapeMismatch(format!(
                "functional '{}' has dim {}, ensemble has dim {}",
                self.name,
                self.dim,
                x.dim()
            )));
        }
        Ok(())
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Weighted mean of the integrand over arbitrary atoms.
pub fn eval_atoms(f: &Functional, atoms: Atoms) -> Result<f64> {
    let st = f.stats(atoms);
    let v = atoms.expect(|i| f.integrand(atoms.point(i), &st));
    if !v.is_finite() {
        return Err(Error::NumericalOverflow(format!("functional '{}' is not finite", f.name)));
    }
    Ok(v)
}

/// F(X) = mean over particles of f(Xᵢ, law(X)).
pub fn eval_f(f: &Functional, x: &ParticleEnsemble) -> Result<f64> {
    f.check_dim(x)?;
    eval_atoms(f, Atoms::of(x))
}

/// Per-particle integrand values f(Xᵢ, law(X)).
pub fn integrand_values(f: &Functional, x: &ParticleEnsemble) -> Result<Vec<f64>> {
    f.check_dim(x)?;
    let atoms = Atoms::of(x);
    let st = f.stats(atoms);
    Ok((0..x.n_particles()).map(|i| f.integrand(x.particle(i), &st)).collect())
}

/// D_X F(X): per-particle D_x ∂F/∂m(law(X))(Xᵢ).
pub fn grad_f(f: &Functional, x: &ParticleEnsemble) -> Result<ParticleEnsemble> {
    f.check_dim(x)?;
    let st = f.stats(Atoms::of(x));
    let mut out = ParticleEnsemble::zeros(x.n_particles(), x.dim());
    for i in 0..x.n_particles() {
        f.grad_point(x.particle(i), &st, out.particle_mut(i));
    }
    Ok(out)
}

/// Central-difference reconstruction of D_X F, one particle-component bump at a time.
/// The bump of size `step` on one particle is the H-direction of weight 1/N, so the
/// quotient is rescaled by N.
pub fn fd_gateaux_grad(f: &Functional, x: &ParticleEnsemble, step: f64) -> Result<ParticleEnsemble> {
    f.check_dim(x)?;
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::InvalidArgument(format!("step must be positive, got {step}")));
    }
    let n = x.n_particles();
    let d = x.dim();
    let scale = n as f64;
    let curvature = f.regularity().lipschitz.max(1.0);
    let f0 = eval_f(f, x)?;
    let mut out = ParticleEnsemble::zeros(n, d);
    let mut work = x.clone();
    for i in 0..n {
        for c in 0..d {
            let orig = work.particle(i)[c];
            work.particle_mut(i)[c] = orig + step;
            let fp = eval_f(f, &work)?;
            work.particle_mut(i)[c] = orig - step;
            let fm = eval_f(f, &work)?;
            work.particle_mut(i)[c] = orig;
            let fwd = (fp - f0) / step * scale;
            let bwd = (f0 - fm) / step * scale;
            // One-sided quotients differ by about step·curvature; more than ten
            // times that means the differences are dominated by cancellation.
            if (fwd - bwd).abs() > 10.0 * step * curvature {
                return Err(Error::StepTooSmall(format!(
                    "forward/backward quotients differ by {:e} at particle {i}, component {c}",
                    (fwd - bwd).abs()
                )));
            }
            out.particle_mut(i)[c] = (fp - fm) / (2.0 * step) * scale;
        }
    }
    Ok(out)
}

/// Γ(X)Z = D²_x ∂F/∂m(X) Z + Ẽ[D_x D_x̃ ∂²F/∂m²(X, X̃) Z̃].
pub fn hess_action(f: &Functional, x: &ParticleEnsemble, z: &ParticleEnsemble) -> Result<ParticleEnsemble> {
    f.check_dim(x)?;
    x.check_shape(z)?;
    let n = x.n_particles();
    let atoms = Atoms::of(x);
    let st = f.stats(atoms);
    let mut out = ParticleEnsemble::zeros(n, x.dim());
    for i in 0..n {
        f.hess_local_point(x.particle(i), &st, z.particle(i), out.particle_mut(i));
    }
    if f.is_zero() {
        return Ok(out);
    }
    match f.mixed {
        MixedTerm::Factorized {} => {
            let agg = f.mixed_aggregate(atoms, z.samples());
            for i in 0..n {
                f.mixed_apply(x.particle(i), &agg, out.particle_mut(i));
            }
        }
        MixedTerm::IndependentCopy { seed } => {
            let perm = rng::permutation(n, seed);
            for i in 0..n {
                let j = perm[i];
                f.mixed_kernel_add(x.particle(i), x.particle(j), z.particle(j), 1.0, out.particle_mut(i));
            }
        }
        MixedTerm::DoubleSum {} => {
            if n > DOUBLE_SUM_MAX {
                return Err(Error::TooLarge(n, DOUBLE_SUM_MAX));
            }
            let w = 1.0 / n as f64;
            for i in 0..n {
                let mut acc = vec![0.0; x.dim()];
                for j in 0..n {
                    f.mixed_kernel_add(x.particle(i), x.particle(j), z.particle(j), w, &mut acc);
                }
                for (o, a) in out.particle_mut(i).iter_mut().zip(acc) {
                    *o += a;
                }
            }
        }
    }
    Ok(out)
}

/// The operator Γ(X) applied to Z; identical to [`hess_action`].
pub fn gamma_action(f: &Functional, x: &ParticleEnsemble, z: &ParticleEnsemble) -> Result<ParticleEnsemble> {
    hess_action(f, x, z)
}

/// B(X)(Z, Y): local term paired with Y plus the mixed term over the coupling (X, X̃).
pub fn bilinear_b(f: &Functional, x: &ParticleEnsemble, z: &ParticleEnsemble, y: &ParticleEnsemble) -> Result<f64> {
    f.check_dim(x)?;
    x.check_shape(z)?;
    x.check_shape(y)?;
    let n = x.n_particles();
    let d = x.dim();
    let atoms = Atoms::of(x);
    let st = f.stats(atoms);
    let local = pairwise_sum_by(n, |i| {
        let mut hz = vec![0.0; d];
        f.hess_local_point(x.particle(i), &st, z.particle(i), &mut hz);
        dot(&hz, y.particle(i))
    }) / n as f64;
    let mixed = match f.mixed {
        MixedTerm::Factorized {} => {
            let ay = f.mixed_aggregate(atoms, y.samples());
            let az = f.mixed_aggregate(atoms, z.samples());
            f.mixed_bilinear(&ay, &az)
        }
        MixedTerm::IndependentCopy { seed } => {
            let xt = independent_copy(x, seed)?;
            let zt = independent_copy(z, seed)?;
            pairwise_sum_by(n, |i| {
                let mut k = vec![0.0; d];
                f.mixed_kernel_add(x.particle(i), xt.particle(i), zt.particle(i), 1.0, &mut k);
                dot(&k, y.particle(i))
            }) / n as f64
        }
        MixedTerm::DoubleSum {} => {
            if n > DOUBLE_SUM_MAX {
                return Err(Error::TooLarge(n, DOUBLE_SUM_MAX));
            }
            pairwise_sum_by(n, |i| {
                let mut k = vec![0.0; d];
                for j in 0..n {
                    f.mixed_kernel_add(x.particle(i), x.particle(j), z.particle(j), 1.0, &mut k);
                }
                dot(&k, y.particle(i))
            }) / (n as f64 * n as f64)
        }
    };
    Ok(local + mixed)
}

/// D³F(X)(Ξ, Υ), bilinear in the two directions.
pub fn third_action(
    f: &Functional,
    x: &ParticleEnsemble,
    xi: &ParticleEnsemble,
    ups: &ParticleEnsemble,
) -> Result<ParticleEnsemble> {
    f.check_dim(x)?;
    x.check_shape(xi)?;
    x.check_shape(ups)?;
    let n = x.n_particles();
    let d = x.dim();
    let mut out = ParticleEnsemble::zeros(n, d);
    if let FunctionalKind::Stress { alpha, beta, .. } = f.kind {
        let atoms = Atoms::of(x);
        let st = f.stats(atoms);
        let xs = x.samples();
        let e_cos_u: Vec<f64> = (0..d).map(|c| atoms.expect(|i| xs[i * d + c].cos() * ups.samples()[i * d + c])).collect();
        let e_cos_xi: Vec<f64> = (0..d).map(|c| atoms.expect(|i| xs[i * d + c].cos() * xi.samples()[i * d + c])).collect();
        let e_sin_ux: Vec<f64> = (0..d)
            .map(|c| atoms.expect(|i| xs[i * d + c].sin() * ups.samples()[i * d + c] * xi.samples()[i * d + c]))
            .collect();
        for i in 0..n {
            for c in 0..d {
                let xv = xs[i * d + c];
                let (s, co) = xv.sin_cos();
                let u = ups.samples()[i * d + c];
                let e = xi.samples()[i * d + c];
                out.samples_mut()[i * d + c] = alpha * s * u * e
                    - beta * e_cos_u[c] * s * e
                    - beta * st.sin_mean[c] * co * u * e
                    - beta * s * u * e_cos_xi[c]
                    - beta * co * e_sin_ux[c];
            }
        }
    }
    Ok(out)
}

/// |F(X+εY) − F(X) − ε((D F(X), Y)) − ε²/2 ((Γ(X)Y, Y))|.
pub fn second_order_taylor_residual(f: &Functional, x: &ParticleEnsemble, y: &ParticleEnsemble, eps: f64) -> Result<f64> {
    x.check_shape(y)?;
    if eps == 0.0 {
        return Ok(0.0);
    }
    let xe = x.lin_comb(1.0, y, eps)?;
    let g = grad_f(f, x)?;
    let gy = gamma_action(f, x, y)?;
    let r = eval_f(f, &xe)? - eval_f(f, x)? - eps * h_inner(&g, y)? - 0.5 * eps * eps * h_inner(&gy, y)?;
    Ok(r.abs())
}

/// Worst observed ratio for one bound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundsReport {
    pub lipschitz_ratio: f64,
    pub growth_ratio: f64,
    pub quasi_convexity_ratio: f64,
    pub holder_ratio: f64,
    pub violations: Vec<String>,
}

impl BoundsReport {
    pub fn ok(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Sample random ensemble pairs and compare observed ratios with the declared constants.
pub fn validate_bounds(f: &Functional, spec: &ProblemSpec, bounds: &Regularity, n_trials: usize, seed: u64) -> Result<BoundsReport> {
    let n = 256;
    let d = spec.dim;
    if f.dim != d {
        return Err(Error::ShapeMismatch("functional and problem dimensions differ".into()));
    }
    let g0 = grad_f(f, &ParticleEnsemble::zeros(n, d))?.norm();
    let growth_c = g0.max(bounds.lipschitz);
    let mut rep = BoundsReport { lipschitz_ratio: 0.0, growth_ratio: 0.0, quasi_convexity_ratio: 0.0, holder_ratio: 0.0, violations: vec![] };
    for t in 0..n_trials {
        let s = seed.wrapping_mul(1_000_003).wrapping_add(t as u64 * 4);
        let scale = 0.25 + 2.0 * rng::normal_at(s, rng::Domain::Sample, 99, 0).abs();
        let x1 = ParticleEnsemble::gaussian(n, d, 0.0, scale, s);
        let x2 = x1.lin_comb(1.0, &ParticleEnsemble::gaussian(n, d, 0.3, 0.5 * scale, s + 1), 1.0)?;
        let z = ParticleEnsemble::gaussian(n, d, 0.0, 1.0, s + 2);
        let dx = x1.sub(&x2)?;
        let dxn = dx.norm();
        if dxn == 0.0 {
            continue;
        }
        let g1 = grad_f(f, &x1)?;
        let g2 = grad_f(f, &x2)?;
        let dg = g1.sub(&g2)?;
        let lip = dg.norm() / dxn;
        let growth = g1.norm() / (1.0 + x1.norm());
        let qc = -h_inner(&dg, &dx)? / (dxn * dxn);
        let h1 = hess_action(f, &x1, &z)?;
        let h2 = hess_action(f, &x2, &z)?;
        let hold = h1.sub(&h2)?.norm() / (dxn.powf(bounds.delta) * z.norm());
        rep.lipschitz_ratio = rep.lipschitz_ratio.max(lip);
        rep.growth_ratio = rep.growth_ratio.max(growth);
        rep.quasi_convexity_ratio = rep.quasi_convexity_ratio.max(qc);
        rep.holder_ratio = rep.holder_ratio.max(hold);
        if lip > bounds.lipschitz * 1.05 + 1e-12 {
            rep.violations.push(format!("trial {t}: Lipschitz ratio {lip:.6} exceeds declared {}", bounds.lipschitz));
        }
        if growth > growth_c * 1.05 + 1e-12 {
            rep.violations.push(format!("trial {t}: growth ratio {growth:.6} exceeds {growth_c}"));
        }
        if qc > bounds.quasi_convexity * 1.05 + 1e-12 {
            rep.violations.push(format!("trial {t}: quasi-convexity ratio {qc:.6} exceeds declared {}", bounds.quasi_convexity));
        }
    }
    Ok(rep)
}
