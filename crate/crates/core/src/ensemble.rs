//! Particle representation of H = L²(Ω; Rⁿ), Wasserstein distances between
//! empirical laws, and the Brownian lattice that realizes the filtrations.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::pairwise_sum_by;
use crate::rng::{self, Domain};

/// Uniform time grid on `[t_start, t_end]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub t_start: f64,
    pub t_end: f64,
    pub n_steps: usize,
}

impl TimeGrid {
    pub fn new(t_start: f64, t_end: f64, n_steps: usize) -> Result<Self> {
        if n_steps < 1 {
            return Err(Error::InvalidDimension("n_steps must be >= 1".into()));
        }
        if !(t_start.is_finite() && t_end.is_finite()) || t_end <= t_start {
            return Err(Error::InvalidArgument(format!(
                "time grid needs t_start < t_end, got [{t_start}, {t_end}]"
            )));
        }
        Ok(TimeGrid { t_start, t_end, n_steps })
    }

    pub fn dt(&self) -> f64 {
        (self.t_end - self.t_start) / self.n_steps as f64
    }

    pub fn horizon(&self) -> f64 {
        self.t_end - self.t_start
    }

    /// Grid point s_k; interpolated from both ends so s_{n_steps} = t_end exactly.
    pub fn time(&self, k: usize) -> f64 {
        if k == self.n_steps {
            return self.t_end;
        }
        let w = k as f64 / self.n_steps as f64;
        self.t_start + (self.t_end - self.t_start) * w
    }

    /// Sub-grid starting at s_{k0}. Requires `k0 < n_steps`.
    pub fn tail(&self, k0: usize) -> Result<TimeGrid> {
        if k0 >= self.n_steps {
            return Err(Error::InvalidArgument(format!(
                "tail start {k0} must be below n_steps {}",
                self.n_steps
            )));
        }
        Ok(TimeGrid { t_start: self.time(k0), t_end: self.t_end, n_steps: self.n_steps - k0 })
    }
}

/// One element X of H: `n_particles` equally weighted samples of dimension `dim`,
/// stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleEnsemble {
    samples: Vec<f64>,
    dim: usize,
    pub tag: Option<String>,
}

impl ParticleEnsemble {
    pub fn from_samples(dim: usize, samples: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidDimension("dim must be >= 1".into()));
        }
        if samples.is_empty() || !samples.len().is_multiple_of(dim) {
            return Err(Error::ShapeMismatch(format!(
                "{} values do not form rows of dimension {dim}",
                samples.len()
            )));
        }
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return Err(Error::NumericalOverflow(format!("non-finite sample at flat index {i}")));
        }
        Ok(ParticleEnsemble { samples, dim, tag: None })
    }

    pub fn zeros(n_particles: usize, dim: usize) -> Self {
        ParticleEnsemble { samples: vec![0.0; n_particles * dim], dim, tag: None }
    }

    pub fn constant(n_particles: usize, value: &[f64]) -> Self {
        let mut samples = Vec::with_capacity(n_particles * value.len());
        for _ in 0..n_particles {
            samples.extend_from_slice(value);
        }
        ParticleEnsemble { samples, dim: value.len(), tag: None }
    }

    /// i.i.d. Gaussian samples with per-component mean and standard deviation.
    pub fn gaussian(n_particles: usize, dim: usize, mean: f64, std: f64, seed: u64) -> Self {
        let mut samples = vec![0.0; n_particles * dim];
        rng::fill_normals(seed, Domain::Sample, 0, &mut samples);
        for v in samples.iter_mut() {
            *v = mean + std * *v;
        }
        ParticleEnsemble { samples, dim, tag: None }
    }

    /// Gaussian samples shifted and scaled so that each component has exactly the
    /// given empirical mean and standard deviation.
    pub fn gaussian_matched(n_particles: usize, dim: usize, mean: f64, std: f64, seed: u64) -> Self {
        let mut x = ParticleEnsemble::gaussian(n_particles, dim, 0.0, 1.0, seed);
        let m = x.mean_vector();
        let var = x.covariance();
        for i in 0..n_particles {
            for (c, v) in x.particle_mut(i).iter_mut().enumerate() {
                *v = mean + std * (*v - m[c]) / var[c * dim + c].sqrt();
            }
        }
        x
    }

    pub fn with_tag(mut self, tag: impl Into<String>) -> Self {
        self.tag = Some(tag.into());
        self
    }

    pub fn n_particles(&self) -> usize {
        self.samples.len() / self.dim
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn weight(&self) -> f64 {
        1.0 / self.n_particles() as f64
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn samples_mut(&mut self) -> &mut [f64] {
        &mut self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn particle(&self, i: usize) -> &[f64] {
        &self.samples[i * self.dim..(i + 1) * self.dim]
    }

    pub fn particle_mut(&mut self, i: usize) -> &mut [f64] {
        let d = self.dim;
        &mut self.samples[i * d..(i + 1) * d]
    }

    pub fn same_shape(&self, other: &ParticleEnsemble) -> bool {
        self.dim == other.dim && self.samples.len() == other.samples.len()
    }

    pub fn check_shape(&self, other: &ParticleEnsemble) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::ShapeMismatch(format!(
                "{}x{} vs {}x{}",
                self.n_particles(),
                self.dim,
                other.n_particles(),
                other.dim
            )))
        }
    }

    /// Componentwise mean E[X] with pairwise summation.
    pub fn mean_vector(&self) -> Vec<f64> {
        let n = self.n_particles();
        let d = self.dim;
        (0..d)
            .map(|c| pairwise_sum_by(n, |i| self.samples[i * d + c]) / n as f64)
            .collect()
    }

    /// Row-major covariance matrix.
    pub fn covariance(&self) -> Vec<f64> {
        let n = self.n_particles();
        let d = self.dim;
        let m = self.mean_vector();
        let mut cov = vec![0.0; d * d];
        for r in 0..d {
            for c in r..d {
                let v = pairwise_sum_by(n, |i| {
                    (self.samples[i * d + r] - m[r]) * (self.samples[i * d + c] - m[c])
                }) / n as f64;
                cov[r * d + c] = v;
                cov[c * d + r] = v;
            }
        }
        cov
    }

    pub fn norm(&self) -> f64 {
        h_inner_unchecked(self, self).sqrt()
    }

    pub fn scaled(&self, a: f64) -> ParticleEnsemble {
        self.map_values(|v| a * v)
    }

    pub fn map_values(&self, f: impl Fn(f64) -> f64) -> ParticleEnsemble {
        ParticleEnsemble {
            samples: self.samples.iter().map(|&v| f(v)).collect(),
            dim: self.dim,
            tag: None,
        }
    }

    /// `a * self + b * other`.
    pub fn lin_comb(&self, a: f64, other: &ParticleEnsemble, b: f64) -> Result<ParticleEnsemble> {
        self.check_shape(other)?;
        Ok(ParticleEnsemble {
            samples: self.samples.iter().zip(&other.samples).map(|(x, y)| a * x + b * y).collect(),
            dim: self.dim,
            tag: None,
        })
    }

    pub fn add(&self, other: &ParticleEnsemble) -> Result<ParticleEnsemble> {
        self.lin_comb(1.0, other, 1.0)
    }

    pub fn sub(&self, other: &ParticleEnsemble) -> Result<ParticleEnsemble> {
        self.lin_comb(1.0, other, -1.0)
    }

    /// `self += a * other`.
    pub fn axpy(&mut self, a: f64, other: &ParticleEnsemble) -> Result<()> {
        self.check_shape(other)?;
        for (x, y) in self.samples.iter_mut().zip(&other.samples) {
            *x += a * y;
        }
        Ok(())
    }

    /// Particle `i` of the result is particle `perm[i]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> ParticleEnsemble {
        let d = self.dim;
        let mut samples = Vec::with_capacity(self.samples.len());
        for &p in perm {
            samples.extend_from_slice(&self.samples[p * d..(p + 1) * d]);
        }
        ParticleEnsemble { samples, dim: d, tag: self.tag.clone() }
    }

    /// Stack the columns of several ensembles (same particle count) into one.
    pub fn hstack(parts: &[&ParticleEnsemble]) -> Result<ParticleEnsemble> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("hstack of nothing".into()))?;
        let n = first.n_particles();
        if parts.iter().any(|p| p.n_particles() != n) {
            return Err(Error::ShapeMismatch("hstack particle counts differ".into()));
        }
        let dim: usize = parts.iter().map(|p| p.dim).sum();
        let mut samples = Vec::with_capacity(n * dim);
        for i in 0..n {
            for p in parts {
                samples.extend_from_slice(p.particle(i));
            }
        }
        Ok(ParticleEnsemble { samples, dim, tag: None })
    }

    /// Law with atoms in canonical (lexicographic) order, so permuted ensembles give
    /// identical laws.
    pub fn law(&self) -> EmpiricalLaw {
        let d = self.dim;
        let mut rows: Vec<&[f64]> = self.samples.chunks(d).collect();
        rows.sort_by(|a, b| {
            a.iter().zip(*b).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal)
        });
        EmpiricalLaw { atoms: rows.concat(), dim: d }
    }

    /// Columnar CSV with header `particle_index,x_0,..,x_{n-1}`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let mut header = vec!["particle_index".to_string()];
        header.extend((0..self.dim).map(|c| format!("x_{c}")));
        wr.write_record(&header).map_err(|e| Error::Io(e.to_string()))?;
        for i in 0..self.n_particles() {
            let mut rec = vec![i.to_string()];
            rec.extend(self.particle(i).iter().map(|v| format!("{v:?}")));
            wr.write_record(&rec).map_err(|e| Error::Io(e.to_string()))?;
        }
        wr.flush().map_err(|e| Error::Io(e.to_string()))
    }

    /// Parse the CSV written by [`ParticleEnsemble::write_csv`]. Rows must be in
    /// particle-index order starting from 0.
    pub fn read_csv<R: Read>(r: R) -> Result<ParticleEnsemble> {
        let mut rd = csv::ReaderBuilder::new().has_headers(true).from_reader(r);
        let header = rd.headers().map_err(|e| Error::Io(e.to_string()))?.clone();
        if header.is_empty() || &header[0] != "particle_index" {
            return Err(Error::Io("first column must be particle_index".into()));
        }
        let dim = header.len() - 1;
        if dim == 0 {
            return Err(Error::InvalidDimension("no coordinate columns".into()));
        }
        for (c, name) in header.iter().skip(1).enumerate() {
            if name != format!("x_{c}") {
                return Err(Error::Io(format!("column {} must be x_{c}, found {name}", c + 1)));
            }
        }
        let mut samples = Vec::new();
        for (row, rec) in rd.records().enumerate() {
            let rec = rec.map_err(|e| Error::Io(e.to_string()))?;
            if rec.len() != dim + 1 {
                return Err(Error::Io(format!("row {row} has {} fields", rec.len())));
            }
            let idx: usize = rec[0]
                .trim()
                .parse()
                .map_err(|_| Error::Io(format!("row {row}: bad particle_index")))?;
            if idx != row {
                return Err(Error::Io(format!("row {row}: particle_index {idx} out of order")));
            }
            for c in 0..dim {
                let v: f64 = rec[c + 1]
                    .trim()
                    .parse()
                    .map_err(|_| Error::Io(format!("row {row}: bad value in x_{c}")))?;
                samples.push(v);
            }
        }
        ParticleEnsemble::from_samples(dim, samples)
    }
}

/// Law of an ensemble: the multiset of atoms with uniform weights.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalLaw {
    atoms: Vec<f64>,
    dim: usize,
}

impl EmpiricalLaw {
    pub fn n_atoms(&self) -> usize {
        self.atoms.len() / self.dim
    }
    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn atoms(&self) -> &[f64] {
        &self.atoms
    }
    fn atom(&self, i: usize) -> &[f64] {
        &self.atoms[i * self.dim..(i + 1) * self.dim]
    }

    fn as_ensemble(&self) -> ParticleEnsemble {
        ParticleEnsemble { samples: self.atoms.clone(), dim: self.dim, tag: None }
    }

    pub fn mean(&self) -> Vec<f64> {
        self.as_ensemble().mean_vector()
    }

    pub fn covariance(&self) -> Vec<f64> {
        self.as_ensemble().covariance()
    }

    /// E|X|².
    pub fn second_moment(&self) -> f64 {
        self.as_ensemble().norm().powi(2)
    }
}

fn h_inner_unchecked(x: &ParticleEnsemble, y: &ParticleEnsemble) -> f64 {
    let d = x.dim;
    let n = x.n_particles();
    pairwise_sum_by(n, |i| {
        let mut s = 0.0;
        for c in 0..d {
            s += x.samples[i * d + c] * y.samples[i * d + c];
        }
        s
    }) / n as f64
}

/// ((X, Y)) = E[X · Y], particle i of both arguments being the same sample point.
pub fn h_inner(x: &ParticleEnsemble, y: &ParticleEnsemble) -> Result<f64> {
    x.check_shape(y)?;
    Ok(h_inner_unchecked(x, y))
}

pub fn h_norm(x: &ParticleEnsemble) -> f64 {
    x.norm()
}

/// H-norm of X − Y.
pub fn h_dist(x: &ParticleEnsemble, y: &ParticleEnsemble) -> Result<f64> {
    x.check_shape(y)?;
    let d = x.dim;
    let n = x.n_particles();
    Ok((pairwise_sum_by(n, |i| {
        let mut s = 0.0;
        for c in 0..d {
            let e = x.samples[i * d + c] - y.samples[i * d + c];
            s += e * e;
        }
        s
    }) / n as f64)
        .sqrt())
}

/// W₂ between two 1D empirical laws through the quantile (sorted) coupling.
pub fn wasserstein2_1d(mu: &EmpiricalLaw, nu: &EmpiricalLaw) -> Result<f64> {
    if mu.dim != 1 || nu.dim != 1 {
        return Err(Error::DimensionUnsupported("quantile coupling needs dim = 1".into()));
    }
    if mu.n_atoms() != nu.n_atoms() {
        return Err(Error::ShapeMismatch("atom counts differ".into()));
    }
    let mut a = mu.atoms.clone();
    let mut b = nu.atoms.clone();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let n = a.len();
    Ok((pairwise_sum_by(n, |i| (a[i] - b[i]).powi(2)) / n as f64).sqrt())
}

pub const EXACT_W2_MAX: usize = 512;

/// Exact W₂ over permutation couplings, by optimal assignment on squared distances.
/// Test oracle only; limited to [`EXACT_W2_MAX`] atoms.
pub fn wasserstein2_exact_small(mu: &EmpiricalLaw, nu: &EmpiricalLaw) -> Result<f64> {
    if mu.dim != nu.dim {
        return Err(Error::ShapeMismatch("dimensions differ".into()));
    }
    let n = mu.n_atoms();
    if n != nu.n_atoms() {
        return Err(Error::ShapeMismatch("atom counts differ".into()));
    }
    if n > EXACT_W2_MAX {
        return Err(Error::TooLarge(n, EXACT_W2_MAX));
    }
    let cost = |i: usize, j: usize| -> f64 {
        mu.atom(i).iter().zip(nu.atom(j)).map(|(a, b)| (a - b).powi(2)).sum()
    };
    let assignment = min_cost_assignment(n, cost);
    let total = pairwise_sum_by(n, |i| cost(i, assignment[i]));
    Ok((total.max(0.0) / n as f64).sqrt())
}

/// Hungarian algorithm with potentials, O(n³). Returns `a` with row i matched to column a[i].
fn min_cost_assignment(n: usize, cost: impl Fn(usize, usize) -> f64) -> Vec<usize> {
    let inf = f64::INFINITY;
    // 1-based arrays; index 0 is the virtual column.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut a = vec![0usize; n];
    for j in 1..=n {
        a[p[j] - 1] = j - 1;
    }
    a
}

/// Moment surrogate for W₂ in dimension > 1: |Δmean| + Frobenius norm of Δcovariance.
pub fn moment_gap(a: &ParticleEnsemble, b: &ParticleEnsemble) -> Result<f64> {
    a.check_shape(b)?;
    let dm: f64 = a
        .mean_vector()
        .iter()
        .zip(b.mean_vector())
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let dc: f64 = a
        .covariance()
        .iter()
        .zip(b.covariance())
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    Ok(dm + dc)
}

/// Law distance used by iteration diagnostics: exact quantile W₂ in 1D, moment surrogate otherwise.
pub fn flow_gap(a: &ParticleEnsemble, b: &ParticleEnsemble) -> Result<f64> {
    if a.dim() == 1 {
        a.check_shape(b)?;
        wasserstein2_1d(&a.law(), &b.law())
    } else {
        moment_gap(a, b)
    }
}

/// Same multiset of samples, reassigned to particles by a seeded uniform permutation.
pub fn independent_copy(x: &ParticleEnsemble, seed: u64) -> Result<ParticleEnsemble> {
    let n = x.n_particles();
    if n < 2 {
        return Err(Error::InvalidDimension("independent copy needs >= 2 particles".into()));
    }
    Ok(x.permuted(&rng::permutation(n, seed)))
}

/// Apply `map` to every sample; non-finite output is an error.
pub fn push_forward(
    x: &ParticleEnsemble,
    map: impl Fn(&[f64], &mut [f64]),
) -> Result<ParticleEnsemble> {
    let d = x.dim;
    let mut out = vec![0.0; x.samples.len()];
    for i in 0..x.n_particles() {
        map(x.particle(i), &mut out[i * d..(i + 1) * d]);
    }
    if let Some(i) = out.iter().position(|v| !v.is_finite()) {
        return Err(Error::NumericalOverflow(format!("push-forward produced non-finite value at particle {}", i / d)));
    }
    Ok(ParticleEnsemble { samples: out, dim: d, tag: None })
}

/// How lattice increments are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LatticeSampling {
    /// Independent N(0, dt) draws.
    #[default]
    Iid,
    /// Draws orthogonalized against constants, the anchor ensembles and all
    /// earlier increment columns, then rescaled to empirical variance exactly dt.
    Orthogonal,
}

/// Brownian increments on a time grid, `increments[k][i][c]` flattened.
#[derive(Debug, Clone, PartialEq)]
pub struct PathLattice {
    pub grid: TimeGrid,
    n_particles: usize,
    dim: usize,
    pub seed: u64,
    pub sampling: LatticeSampling,
    increments: Vec<f64>,
}

/// Orthonormal set under the empirical inner product (1/N)Σ aᵢbᵢ.
pub(crate) struct EmpiricalBasis {
    n: usize,
    vectors: Vec<Vec<f64>>,
}

impl EmpiricalBasis {
    pub(crate) fn new(n: usize) -> Self {
        EmpiricalBasis { n, vectors: Vec::new() }
    }

    fn ip(&self, a: &[f64], b: &[f64]) -> f64 {
        pairwise_sum_by(self.n, |i| a[i] * b[i]) / self.n as f64
    }

    pub(crate) fn project_out(&self, v: &mut [f64]) {
        // Two passes of modified Gram-Schmidt keep orthogonality at roundoff level.
        for _ in 0..2 {
            for q in &self.vectors {
                let c = self.ip(v, q);
                for (x, y) in v.iter_mut().zip(q) {
                    *x -= c * y;
                }
            }
        }
    }

    /// Project `v` out of the span and, if anything is left, add the normalized
    /// remainder. Returns the remainder's norm before normalization.
    pub(crate) fn push(&mut self, mut v: Vec<f64>) -> f64 {
        let before = self.ip(&v, &v).sqrt();
        self.project_out(&mut v);
        let nrm = self.ip(&v, &v).sqrt();
        if nrm > 1e-10 * before.max(f64::MIN_POSITIVE) {
            for x in v.iter_mut() {
                *x /= nrm;
            }
            self.vectors.push(v);
        }
        nrm
    }

    pub(crate) fn len(&self) -> usize {
        self.vectors.len()
    }

    pub(crate) fn last(&self) -> &[f64] {
        self.vectors.last().expect("non-empty basis")
    }

    pub(crate) fn push_ensemble_columns(&mut self, e: &ParticleEnsemble) {
        for c in 0..e.dim() {
            let col: Vec<f64> = (0..e.n_particles()).map(|i| e.particle(i)[c]).collect();
            self.push(col);
        }
    }
}

/// i.i.d. Brownian lattice.
pub fn brownian_lattice(grid: TimeGrid, n_particles: usize, dim: usize, seed: u64) -> Result<PathLattice> {
    brownian_lattice_with(grid, n_particles, dim, seed, LatticeSampling::Iid, &[])
}

/// Brownian lattice with an explicit sampling mode. `anchors` are only used by
/// [`LatticeSampling::Orthogonal`]: increments are made empirically orthogonal to them.
pub fn brownian_lattice_with(
    grid: TimeGrid,
    n_particles: usize,
    dim: usize,
    seed: u64,
    sampling: LatticeSampling,
    anchors: &[&ParticleEnsemble],
) -> Result<PathLattice> {
    if n_particles < 2 || dim < 1 {
        return Err(Error::InvalidDimension(format!(
            "lattice needs n_particles >= 2 and dim >= 1, got {n_particles} and {dim}"
        )));
    }
    let dt = grid.dt();
    let sd = dt.sqrt();
    let block = n_particles * dim;
    let mut increments = vec![0.0; grid.n_steps * block];
    for k in 0..grid.n_steps {
        rng::fill_normals(seed, Domain::Lattice, k as u64, &mut increments[k * block..(k + 1) * block]);
    }
    match sampling {
        LatticeSampling::Iid => {
            for v in increments.iter_mut() {
                *v *= sd;
            }
        }
        LatticeSampling::Orthogonal => {
            let needed = 1 + anchors.iter().map(|a| a.dim()).sum::<usize>() + grid.n_steps * dim;
            if n_particles <= needed {
                return Err(Error::InvalidDimension(format!(
                    "orthogonal lattice needs more than {needed} particles, got {n_particles}"
                )));
            }
            let mut basis = EmpiricalBasis::new(n_particles);
            basis.push(vec![1.0; n_particles]);
            for a in anchors {
                if a.n_particles() != n_particles {
                    return Err(Error::ShapeMismatch("anchor particle count differs from lattice".into()));
                }
                basis.push_ensemble_columns(a);
            }
            for k in 0..grid.n_steps {
                for c in 0..dim {
                    let col: Vec<f64> =
                        (0..n_particles).map(|i| increments[k * block + i * dim + c]).collect();
                    let before = basis.len();
                    basis.push(col);
                    if basis.len() == before {
                        return Err(Error::NumericalOverflow("degenerate lattice column".into()));
                    }
                    let q = basis.vectors.last().unwrap();
                    for i in 0..n_particles {
                        increments[k * block + i * dim + c] = sd * q[i];
                    }
                }
            }
        }
    }
    Ok(PathLattice { grid, n_particles, dim, seed, sampling, increments })
}

impl PathLattice {
    /// Build from explicit increments laid out `[step][particle][component]`.
    pub fn from_increments(
        grid: TimeGrid,
        n_particles: usize,
        dim: usize,
        seed: u64,
        increments: Vec<f64>,
    ) -> Result<PathLattice> {
        if n_particles < 2 || dim < 1 {
            return Err(Error::InvalidDimension("lattice needs n_particles >= 2, dim >= 1".into()));
        }
        if increments.len() != grid.n_steps * n_particles * dim {
            return Err(Error::ShapeMismatch("increment count does not match grid".into()));
        }
        if increments.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericalOverflow("non-finite increment".into()));
        }
        Ok(PathLattice { grid, n_particles, dim, seed, sampling: LatticeSampling::Iid, increments })
    }

    pub fn n_particles(&self) -> usize {
        self.n_particles
    }
    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn n_steps(&self) -> usize {
        self.grid.n_steps
    }

    /// ΔW over step k, all particles, row-major.
    pub fn increment(&self, k: usize) -> &[f64] {
        let b = self.n_particles * self.dim;
        &self.increments[k * b..(k + 1) * b]
    }

    pub fn increments(&self) -> &[f64] {
        &self.increments
    }

    /// The lattice restricted to steps `k0..`, on the sub-grid starting at s_{k0}.
    pub fn tail(&self, k0: usize) -> Result<PathLattice> {
        let grid = self.grid.tail(k0)?;
        let b = self.n_particles * self.dim;
        Ok(PathLattice {
            grid,
            n_particles: self.n_particles,
            dim: self.dim,
            seed: self.seed,
            sampling: self.sampling,
            increments: self.increments[k0 * b..].to_vec(),
        })
    }

    /// Cumulative W(s_k) − W(t) for k = 0..=n_steps.
    pub fn cumulative(&self) -> Vec<ParticleEnsemble> {
        let b = self.n_particles * self.dim;
        let mut out = Vec::with_capacity(self.grid.n_steps + 1);
        let mut acc = vec![0.0; b];
        out.push(ParticleEnsemble { samples: acc.clone(), dim: self.dim, tag: None });
        for k in 0..self.grid.n_steps {
            for (a, w) in acc.iter_mut().zip(self.increment(k)) {
                *a += w;
            }
            out.push(ParticleEnsemble { samples: acc.clone(), dim: self.dim, tag: None });
        }
        out
    }

    /// Copy with increments of steps `>= k` replaced by those of `other`.
    pub fn splice_from(&self, k: usize, other: &PathLattice) -> Result<PathLattice> {
        if other.increments.len() != self.increments.len() {
            return Err(Error::ShapeMismatch("lattices differ in shape".into()));
        }
        let b = self.n_particles * self.dim;
        let mut inc = self.increments.clone();
        inc[k * b..].copy_from_slice(&other.increments[k * b..]);
        Ok(PathLattice { increments: inc, ..self.clone() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn e1(v: &[f64]) -> ParticleEnsemble {
        ParticleEnsemble::from_samples(1, v.to_vec()).unwrap()
    }

    #[test]
    fn grid_endpoint_is_exact() {
        let g = TimeGrid::new(0.1, 0.7, 3).unwrap();
        assert_eq!(g.time(3), 0.7);
        assert!(g.time(1) < g.time(2));
        assert!(TimeGrid::new(0.0, 1.0, 0).is_err());
        assert!(TimeGrid::new(1.0, 1.0, 4).is_err());
    }

    #[test]
    fn inner_product_examples() {
        let ones = ParticleEnsemble::constant(5, &[1.0, 1.0]);
        assert_eq!(h_inner(&ones, &ones).unwrap(), 2.0);
        assert_eq!(h_inner(&e1(&[1.0, -1.0]), &e1(&[2.0, 2.0])).unwrap(), 0.0);
        assert!(h_inner(&ones, &e1(&[1.0])).is_err());
    }

    #[test]
    fn quantile_w2_examples() {
        assert_eq!(wasserstein2_1d(&e1(&[0.0, 2.0]).law(), &e1(&[1.0, 3.0]).law()).unwrap(), 1.0);
        assert_eq!(wasserstein2_1d(&e1(&[0.0, 0.0]).law(), &e1(&[-2.5, -2.5]).law()).unwrap(), 2.5);
        let two = ParticleEnsemble::from_samples(2, vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        assert!(matches!(wasserstein2_1d(&two.law(), &two.law()), Err(Error::DimensionUnsupported(_))));
    }

    #[test]
    fn exact_w2_on_permuted_atoms_is_zero() {
        let a = ParticleEnsemble::from_samples(2, vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        let b = ParticleEnsemble::from_samples(2, vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        assert_eq!(wasserstein2_exact_small(&a.law(), &b.law()).unwrap(), 0.0);
        let big = ParticleEnsemble::zeros(513, 1);
        assert!(matches!(wasserstein2_exact_small(&big.law(), &big.law()), Err(Error::TooLarge(513, 512))));
    }

    #[test]
    fn push_forward_examples() {
        let x = e1(&[1.0, 3.0]);
        let y = push_forward(&x, |p, o| o[0] = 2.0 * p[0]).unwrap();
        assert_eq!(y.samples(), &[2.0, 6.0]);
        let w = wasserstein2_1d(&x.law(), &y.law()).unwrap();
        assert!((w - 5.0_f64.sqrt()).abs() < 1e-15);
        assert!(push_forward(&x, |_, o| o[0] = f64::INFINITY).is_err());
    }

    #[test]
    fn lattice_tail_and_cumulative() {
        let g = TimeGrid::new(0.0, 1.0, 4).unwrap();
        let l = brownian_lattice(g, 8, 2, 3).unwrap();
        let t = l.tail(1).unwrap();
        assert_eq!(t.n_steps(), 3);
        assert_eq!(t.increment(0), l.increment(1));
        assert_eq!(t.grid.t_start, 0.25);
        let cum = l.cumulative();
        assert_eq!(cum.len(), 5);
        assert!(brownian_lattice(g, 1, 1, 0).is_err());
        assert!(brownian_lattice(g, 4, 0, 0).is_err());
    }

    #[test]
    fn orthogonal_lattice_moments_are_exact() {
        let g = TimeGrid::new(0.0, 1.0, 8).unwrap();
        let x = ParticleEnsemble::gaussian(200, 1, 0.0, 1.0, 5);
        let l = brownian_lattice_with(g, 200, 1, 4, LatticeSampling::Orthogonal, &[&x]).unwrap();
        let dt = g.dt();
        for k in 0..8 {
            let inc = l.increment(k);
            let m: f64 = inc.iter().sum::<f64>() / 200.0;
            let v: f64 = inc.iter().map(|w| w * w).sum::<f64>() / 200.0;
            let cx: f64 = inc.iter().zip(x.samples()).map(|(w, a)| w * a).sum::<f64>() / 200.0;
            assert!(m.abs() < 1e-14);
            assert!((v - dt).abs() < 1e-14);
            assert!(cx.abs() < 1e-13);
            for j in 0..k {
                let c: f64 = inc.iter().zip(l.increment(j)).map(|(a, b)| a * b).sum::<f64>();
                assert!(c.abs() < 1e-12);
            }
        }
        assert!(brownian_lattice_with(g, 9, 1, 4, LatticeSampling::Orthogonal, &[]).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let x = ParticleEnsemble::gaussian(7, 3, 0.5, 2.0, 1);
        let mut buf = Vec::new();
        x.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("particle_index,x_0,x_1,x_2\n"));
        let y = ParticleEnsemble::read_csv(buf.as_slice()).unwrap();
        assert_eq!(x.samples(), y.samples());
        assert!(ParticleEnsemble::read_csv("particle_index,x_0\n1,2.0\n".as_bytes()).is_err());
        assert!(ParticleEnsemble::read_csv("idx,x_0\n0,2.0\n".as_bytes()).is_err());
    }
}
