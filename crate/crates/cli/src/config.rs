//! Run configuration: one TOML file per experiment. Unknown keys are errors.

use std::path::{Path, PathBuf};

use mfc_lab::ensemble::{LatticeSampling, ParticleEnsemble, TimeGrid};
use mfc_lab::fbsde::{PicardConfig, Problem};
use mfc_lab::functionals::{Functional, MixedTerm, ProblemSpec};
use mfc_lab::hjbfp::FixedPointConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {msg}")]
    Read { path: String, msg: String },
    #[error("{0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

fn invalid(msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid(msg.into())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Report file stem; defaults to the config file stem.
    #[serde(default)]
    pub name: Option<String>,
    pub problem: ProblemConfig,
    #[serde(default)]
    pub initial: InitialConfig,
    pub discretization: Discretization,
    #[serde(default)]
    pub solver: PicardConfig,
    #[serde(default)]
    pub checks: Vec<CheckConfig>,
    #[serde(default)]
    pub output: OutputConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    pub running: FunctionalConfig,
    pub terminal: FunctionalConfig,
    pub lambda: f64,
    /// Scalar s₀ for σ = s₀I, or a row-major n×n matrix.
    #[serde(default)]
    pub sigma: Sigma,
    pub dim: usize,
    #[serde(default)]
    pub t: f64,
    #[serde(rename = "T")]
    pub t_end: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Sigma {
    Scalar(f64),
    Matrix(Vec<f64>),
}

impl Default for Sigma {
    fn default() -> Self {
        Sigma::Scalar(0.0)
    }
}

/// A catalog entry addressed by name with its parameter block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum FunctionalConfig {
    /// Struct form so that stray parameters are rejected.
    Zero {},
    HalfSquare {
        #[serde(default = "one")]
        weight: f64,
    },
    /// f = ½x·Qx + b·x + x·S·E[X] + κ|x − E[X]|², matrices row-major.
    Quadratic {
        q: Vec<f64>,
        b: Vec<f64>,
        s: Vec<f64>,
        #[serde(default)]
        kappa: f64,
        #[serde(default)]
        mixed: MixedTerm,
    },
    /// f = Σ α cos xᶜ + ½β E[sin Xᶜ] sin xᶜ − ½γ(xᶜ)².
    Stress {
        alpha: f64,
        beta: f64,
        gamma: f64,
        #[serde(default)]
        mixed: MixedTerm,
    },
}

fn one() -> f64 {
    1.0
}

impl FunctionalConfig {
    pub fn build(&self, dim: usize) -> mfc_lab::error::Result<Functional> {
        Ok(match self {
            FunctionalConfig::Zero {} => Functional::zero(dim),
            FunctionalConfig::HalfSquare { weight } => Functional::half_square(dim, *weight),
            FunctionalConfig::Quadratic { q, b, s, kappa, mixed } => {
                Functional::quadratic(dim, q.clone(), b.clone(), s.clone(), *kappa)?.with_mixed(*mixed)
            }
            FunctionalConfig::Stress { alpha, beta, gamma, mixed } => Functional::stress(dim, *alpha, *beta, *gamma)?.with_mixed(*mixed),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialConfig {
    /// Per-component Gaussian with exactly matched empirical moments when `matched`.
    Gaussian {
        #[serde(default)]
        mean: f64,
        #[serde(default = "one")]
        std: f64,
        #[serde(default = "yes")]
        matched: bool,
    },
    /// Ensemble CSV, resolved against the config file directory.
    Csv { path: PathBuf },
}

fn yes() -> bool {
    true
}

impl Default for InitialConfig {
    fn default() -> Self {
        InitialConfig::Gaussian { mean: 0.0, std: 1.0, matched: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Discretization {
    pub n_steps: usize,
    pub n_particles: usize,
    /// Mandatory: nothing is seeded from the clock.
    pub seed: u64,
    #[serde(default)]
    pub lattice: LatticeSampling,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    /// Report directory, resolved against the config file directory. Overridden by
    /// `MFC_LAB_OUTPUT_DIR`.
    #[serde(default)]
    pub dir: Option<PathBuf>,
}

/// One requested check with its tolerances. Defaults are the acceptance thresholds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "check", rename_all = "snake_case", deny_unknown_fields)]
pub enum CheckConfig {
    /// Central differences of V along X, D_X V and random directions.
    GradientFd {
        #[serde(default = "d_fd_step")]
        step: f64,
        #[serde(default)]
        n_random: usize,
        #[serde(default = "d_1e_3")]
        tol: f64,
    },
    /// Dynamic programming over [t, t + h]; tolerance scaled by 1 + ‖X‖².
    Dpp {
        h: f64,
        #[serde(default = "d_5e_3")]
        tol: f64,
    },
    /// Bellman residual at h = steps·dt; headline at the first entry, scaled by 1 + ‖X‖².
    Bellman {
        #[serde(default = "d_bellman_steps")]
        steps: Vec<usize>,
        #[serde(default = "d_5e_3")]
        tol: f64,
        #[serde(default = "d_rate")]
        min_rate: f64,
    },
    /// Weak master residual plus the terminal identity 𝒰(X, T) = D_X F_T(X).
    Master {
        #[serde(default = "d_two")]
        steps: usize,
        #[serde(default = "d_eight")]
        n_directions: usize,
        #[serde(default = "d_5e_3")]
        tol: f64,
        #[serde(default = "d_1e_12")]
        terminal_tol: f64,
    },
    /// Hilbert-side identities of the running and terminal functionals.
    Correspondence {
        #[serde(default = "d_hundred")]
        n_triples: usize,
        #[serde(default = "d_1e_10")]
        symmetry_tol: f64,
        #[serde(default = "d_1e_4")]
        grad_tol: f64,
        #[serde(default = "d_1e_10")]
        taylor_tol: f64,
        #[serde(default = "d_1e_12")]
        gamma_tol: f64,
    },
    /// Closed-form LQ value, gradient, second derivative and LQ payoff.
    Riccati {
        #[serde(default = "d_five")]
        n_directions: usize,
        #[serde(default = "d_1e_2")]
        value_tol: f64,
        #[serde(default = "d_1e_2")]
        gradient_tol: f64,
        #[serde(default = "d_2e_2")]
        second_tol: f64,
    },
    /// Strong monotonicity of the cost gradient over random adapted control pairs.
    Monotonicity {
        #[serde(default = "d_fifty")]
        n_pairs: usize,
        #[serde(default = "d_1e_8")]
        tol: f64,
    },
    /// Energy identity at the optimum; tolerance scaled by 1 + ‖X‖².
    EnergyIdentity {
        #[serde(default = "d_1e_2")]
        tol: f64,
    },
    /// One-dimensional quantile coupling against exact assignment on random laws.
    Wasserstein {
        #[serde(default = "d_fifty")]
        n_pairs: usize,
        #[serde(default = "d_max_atoms")]
        max_atoms: usize,
        #[serde(default = "d_1e_12")]
        tol: f64,
    },
    /// Comparison with the one-dimensional HJB-FP grid solution.
    HjbfpCompare {
        #[serde(default = "d_nx")]
        nx: usize,
        #[serde(default = "d_grid_steps")]
        n_steps: usize,
        #[serde(default = "d_width")]
        width: f64,
        #[serde(default = "d_mix")]
        mixture_eps: f64,
        #[serde(default = "d_bulk")]
        bulk_std: f64,
        #[serde(default)]
        fixed_point: FixedPointConfig,
        #[serde(default = "d_1e_3")]
        riccati_tol: f64,
        #[serde(default = "d_2e_2")]
        value_tol: f64,
        #[serde(default = "d_5e_3")]
        gradient_tol: f64,
        #[serde(default = "d_2e_2")]
        weak_tol: f64,
        #[serde(default = "d_1e_12")]
        mass_tol: f64,
    },
    /// Empirical validation of the declared regularity constants.
    BoundsValidation {
        #[serde(default = "d_hundred")]
        n_trials: usize,
    },
}

fn d_fd_step() -> f64 {
    1e-4
}
fn d_1e_2() -> f64 {
    1e-2
}
fn d_2e_2() -> f64 {
    2e-2
}
fn d_1e_3() -> f64 {
    1e-3
}
fn d_5e_3() -> f64 {
    5e-3
}
fn d_1e_4() -> f64 {
    1e-4
}
fn d_1e_8() -> f64 {
    1e-8
}
fn d_1e_10() -> f64 {
    1e-10
}
fn d_1e_12() -> f64 {
    1e-12
}
fn d_rate() -> f64 {
    0.4
}
fn d_bellman_steps() -> Vec<usize> {
    vec![2, 4, 8]
}
fn d_two() -> usize {
    2
}
fn d_five() -> usize {
    5
}
fn d_eight() -> usize {
    8
}
fn d_fifty() -> usize {
    50
}
fn d_hundred() -> usize {
    100
}
fn d_max_atoms() -> usize {
    512
}
fn d_nx() -> usize {
    401
}
fn d_grid_steps() -> usize {
    2000
}
fn d_width() -> f64 {
    6.0
}
fn d_mix() -> f64 {
    0.1
}
fn d_bulk() -> f64 {
    3.0
}

impl CheckConfig {
    pub fn name(&self) -> &'static str {
        match self {
            CheckConfig::GradientFd { .. } => "gradient_fd",
            CheckConfig::Dpp { .. } => "dpp",
            CheckConfig::Bellman { .. } => "bellman",
            CheckConfig::Master { .. } => "master",
            CheckConfig::Correspondence { .. } => "correspondence",
            CheckConfig::Riccati { .. } => "riccati",
            CheckConfig::Monotonicity { .. } => "monotonicity",
            CheckConfig::EnergyIdentity { .. } => "energy_identity",
            CheckConfig::Wasserstein { .. } => "wasserstein",
            CheckConfig::HjbfpCompare { .. } => "hjbfp_compare",
            CheckConfig::BoundsValidation { .. } => "bounds_validation",
        }
    }
}

/// Parse without touching the file system.
pub fn parse(text: &str) -> Result<RunConfig, ConfigError> {
    toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
}

/// A parsed config together with the directory its relative paths refer to.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: RunConfig,
    pub base_dir: PathBuf,
    pub stem: String,
}

pub fn load(path: &Path) -> Result<LoadedConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read { path: path.display().to_string(), msg: e.to_string() })?;
    let config = parse(&text)?;
    let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "run".into());
    Ok(LoadedConfig { config, base_dir, stem })
}

/// Everything a run needs, built and validated from a config.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub problem: Problem,
    pub x: ParticleEnsemble,
    pub time: TimeGrid,
}

fn is_square_half(f: &FunctionalConfig) -> Option<f64> {
    match f {
        FunctionalConfig::HalfSquare { weight } => Some(*weight),
        _ => None,
    }
}

impl RunConfig {
    /// Terminal weight when the problem is the LQ benchmark with isotropic noise.
    pub fn lq_weight(&self) -> Option<f64> {
        match (&self.problem.running, &self.problem.sigma) {
            (FunctionalConfig::Zero {}, Sigma::Scalar(_)) => is_square_half(&self.problem.terminal),
            _ => None,
        }
    }

    pub fn sigma_scalar(&self) -> Option<f64> {
        match self.problem.sigma {
            Sigma::Scalar(s) => Some(s),
            Sigma::Matrix(_) => None,
        }
    }

    pub fn prepare(&self, base_dir: &Path) -> Result<Prepared, ConfigError> {
        let p = &self.problem;
        let d = &self.discretization;
        if let Some(n) = &self.name {
            if n.is_empty() || n.starts_with('.') || n.contains(['/', '\\']) {
                return Err(invalid(format!("name {n:?} must be a plain file stem")));
            }
        }
        if p.dim == 0 {
            return Err(invalid("problem.dim must be at least 1"));
        }
        let time = TimeGrid::new(p.t, p.t_end, d.n_steps).map_err(|e| invalid(format!("time grid: {e}")))?;
        let spec = match &p.sigma {
            Sigma::Scalar(s) => ProblemSpec::isotropic(p.lambda, *s, p.dim, time),
            Sigma::Matrix(m) => ProblemSpec::new(p.lambda, m.clone(), p.dim, time),
        }
        .map_err(|e| invalid(format!("problem: {e}")))?;
        let running = p.running.build(p.dim).map_err(|e| invalid(format!("problem.running: {e}")))?;
        let terminal = p.terminal.build(p.dim).map_err(|e| invalid(format!("problem.terminal: {e}")))?;
        let problem = Problem::new(running, terminal, spec).map_err(|e| invalid(format!("problem: {e}")))?;
        if d.n_particles < 2 {
            return Err(invalid("discretization.n_particles must be at least 2"));
        }
        let x = match &self.initial {
            InitialConfig::Gaussian { mean, std, matched } => {
                if !(*std > 0.0 && std.is_finite() && mean.is_finite()) {
                    return Err(invalid("initial: need finite mean and std > 0"));
                }
                // Derived seeds keep the ensemble independent of the lattice stream.
                let seed = d.seed ^ 0x1417_1a1e;
                if *matched {
                    ParticleEnsemble::gaussian_matched(d.n_particles, p.dim, *mean, *std, seed)
                } else {
                    ParticleEnsemble::gaussian(d.n_particles, p.dim, *mean, *std, seed)
                }
            }
            InitialConfig::Csv { path } => {
                let full = base_dir.join(path);
                let file = std::fs::File::open(&full).map_err(|e| ConfigError::Read { path: full.display().to_string(), msg: e.to_string() })?;
                let x = ParticleEnsemble::read_csv(file).map_err(|e| invalid(format!("initial csv: {e}")))?;
                if x.dim() != p.dim || x.n_particles() != d.n_particles {
                    return Err(invalid(format!(
                        "initial csv has {}×{}, config says {}×{}",
                        x.n_particles(),
                        x.dim(),
                        d.n_particles,
                        p.dim
                    )));
                }
                x
            }
        };
        self.solver.validate().map_err(|e| invalid(format!("solver: {e}")))?;
        for c in &self.checks {
            self.validate_check(c, &time)?;
        }
        Ok(Prepared { problem, x, time })
    }

    fn validate_check(&self, c: &CheckConfig, time: &TimeGrid) -> Result<(), ConfigError> {
        let name = c.name();
        let nt = time.n_steps;
        let need_1d = || {
            if self.problem.dim != 1 {
                Err(invalid(format!("check {name} is one-dimensional")))
            } else {
                Ok(())
            }
        };
        match c {
            CheckConfig::Dpp { h, .. } => {
                steps_of(*h, time).ok_or_else(|| invalid(format!("dpp: h = {h} is not a multiple of dt within (0, T − t]")))?;
            }
            CheckConfig::Bellman { steps, .. } => {
                if steps.is_empty() || steps.iter().any(|&m| m == 0 || m > nt) {
                    return Err(invalid(format!("bellman: steps must lie in 1..={nt}")));
                }
            }
            CheckConfig::Master { steps, n_directions, .. } => {
                if *steps == 0 || 2 * steps > nt || *n_directions == 0 {
                    return Err(invalid(format!("master: need 0 < 2·steps <= {nt} and at least one direction")));
                }
            }
            CheckConfig::Riccati { .. } => {
                if self.lq_weight().is_none() {
                    return Err(invalid("riccati: needs running = zero, terminal = half_square and scalar sigma"));
                }
            }
            CheckConfig::HjbfpCompare { nx, n_steps, width, mixture_eps, .. } => {
                need_1d()?;
                if *nx < mfc_lab::hjbfp::MIN_NODES || *n_steps == 0 || !(*width > 0.0) || !(0.0..1.0).contains(mixture_eps) {
                    return Err(invalid("hjbfp_compare: bad grid settings"));
                }
                if !matches!(self.initial, InitialConfig::Gaussian { .. }) {
                    return Err(invalid("hjbfp_compare: needs a Gaussian initial law"));
                }
            }
            CheckConfig::Wasserstein { n_pairs, max_atoms, .. } => {
                if *n_pairs == 0 || *max_atoms < 2 || *max_atoms > mfc_lab::ensemble::EXACT_W2_MAX {
                    return Err(invalid(format!("wasserstein: need pairs > 0 and 2 <= max_atoms <= {}", mfc_lab::ensemble::EXACT_W2_MAX)));
                }
            }
            CheckConfig::GradientFd { step, .. } if !(*step > 0.0) => {
                return Err(invalid("gradient_fd: step must be positive"));
            }
            _ => {}
        }
        Ok(())
    }
}

/// h as a whole number of steps, when it is one.
pub fn steps_of(h: f64, time: &TimeGrid) -> Option<usize> {
    let m = h / time.dt();
    let r = m.round();
    if r >= 1.0 && r as usize <= time.n_steps && (m - r).abs() <= 1e-9 * m.max(1.0) {
        Some(r as usize)
    } else {
        None
    }
}
