//! Least-squares polynomial regression used as the conditional expectation operator.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::ensemble::ParticleEnsemble;
use crate::error::{Error, Result};

/// Conditional-expectation estimator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RegressionMode {
    /// Polynomial least squares on the conditioning features.
    #[default]
    Regression,
    /// Resimulate every particle over all noise branches (O(N²·steps²)); small N only.
    ExactNested,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegressionSpec {
    /// Total degree of the polynomial basis.
    pub degree: usize,
    pub ridge: f64,
    pub mode: RegressionMode,
}

impl Default for RegressionSpec {
    fn default() -> Self {
        RegressionSpec { degree: 2, ridge: 1e-10, mode: RegressionMode::Regression }
    }
}

impl RegressionSpec {
    pub fn validate(&self) -> Result<()> {
        if self.degree < 1 {
            return Err(Error::InvalidArgument("regression degree must be >= 1".into()));
        }
        if !(self.ridge >= 0.0 && self.ridge.is_finite()) {
            return Err(Error::InvalidArgument("ridge must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// Multi-indices of total degree ≤ `degree` in `n_features` variables, constant first.
pub(crate) fn monomials(n_features: usize, degree: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![0; n_features]];
    let mut frontier = vec![vec![0; n_features]];
    for _ in 0..degree {
        let mut next = Vec::new();
        for m in &frontier {
            // Only raise variables at or after the last incremented one, so each
            // multi-index is generated once.
            let last = m.iter().rposition(|&e| e > 0).unwrap_or(0);
            for v in last..n_features {
                let mut m2 = m.clone();
                m2[v] += 1;
                next.push(m2);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

/// Fitted regression: standardization, active basis and coefficients.
#[derive(Debug, Clone)]
pub struct Fit {
    center: Vec<f64>,
    scale: Vec<f64>,
    basis: Vec<Vec<usize>>,
    /// `basis.len() x target_dim`, row-major.
    coef: Vec<f64>,
    target_dim: usize,
}

fn flatten_features(features: &[&ParticleEnsemble]) -> Result<(usize, usize, Vec<f64>)> {
    let n = features
        .first()
        .ok_or_else(|| Error::InvalidArgument("regression needs at least one feature".into()))?
        .n_particles();
    if features.iter().any(|f| f.n_particles() != n) {
        return Err(Error::ShapeMismatch("feature particle counts differ".into()));
    }
    let nf: usize = features.iter().map(|f| f.dim()).sum();
    let mut data = Vec::with_capacity(n * nf);
    for i in 0..n {
        for f in features {
            data.extend_from_slice(f.particle(i));
        }
    }
    Ok((n, nf, data))
}

fn eval_basis(basis: &[Vec<usize>], z: &[f64], row: &mut [f64]) {
    for (b, m) in basis.iter().enumerate() {
        let mut v = 1.0;
        for (j, &e) in m.iter().enumerate() {
            for _ in 0..e {
                v *= z[j];
            }
        }
        row[b] = v;
    }
}

impl Fit {
    /// Least squares of `target` on polynomials of the (standardized) features.
    /// `step` only labels errors.
    pub fn new(features: &[&ParticleEnsemble], target: &ParticleEnsemble, spec: &RegressionSpec, step: usize) -> Result<Fit> {
        spec.validate()?;
        let (n, nf, data) = flatten_features(features)?;
        if target.n_particles() != n {
            return Err(Error::ShapeMismatch("target particle count differs from features".into()));
        }
        let td = target.dim();
        let mut center = vec![0.0; nf];
        let mut scale = vec![0.0; nf];
        for j in 0..nf {
            let m = (0..n).map(|i| data[i * nf + j]).sum::<f64>() / n as f64;
            let v = (0..n).map(|i| (data[i * nf + j] - m).powi(2)).sum::<f64>() / n as f64;
            center[j] = m;
            let sd = v.sqrt();
            // Constant features carry no information beyond the intercept.
            scale[j] = if sd > 1e-12 * (1.0 + m.abs()) { 1.0 / sd } else { 0.0 };
        }
        let all = monomials(nf, spec.degree);
        let basis: Vec<Vec<usize>> = all
            .into_iter()
            .filter(|m| m.iter().enumerate().all(|(j, &e)| e == 0 || scale[j] != 0.0))
            .collect();
        let p = basis.len();
        let mut gram = vec![0.0; p * p];
        let mut rhs = vec![0.0; p * td];
        let mut row = vec![0.0; p];
        let mut z = vec![0.0; nf];
        for i in 0..n {
            for j in 0..nf {
                z[j] = (data[i * nf + j] - center[j]) * scale[j];
            }
            eval_basis(&basis, &z, &mut row);
            for a in 0..p {
                let ra = row[a];
                for b in a..p {
                    gram[a * p + b] += ra * row[b];
                }
                let t = target.particle(i);
                for c in 0..td {
                    rhs[a * td + c] += ra * t[c];
                }
            }
        }
        let inv_n = 1.0 / n as f64;
        let g = DMatrix::from_fn(p, p, |a, b| {
            let v = if a <= b { gram[a * p + b] } else { gram[b * p + a] } * inv_n;
            if a == b {
                v + spec.ridge
            } else {
                v
            }
        });
        let chol = g.cholesky().ok_or(Error::SingularRegression { step })?;
        let mut coef = vec![0.0; p * td];
        for c in 0..td {
            let r = DVector::from_fn(p, |a, _| rhs[a * td + c] * inv_n);
            let sol = chol.solve(&r);
            if sol.iter().any(|v| !v.is_finite()) {
                return Err(Error::SingularRegression { step });
            }
            for a in 0..p {
                coef[a * td + c] = sol[a];
            }
        }
        Ok(Fit { center, scale, basis, coef, target_dim: td })
    }

    pub fn n_basis(&self) -> usize {
        self.basis.len()
    }

    /// Evaluate the fitted function at one feature vector.
    pub fn predict_point(&self, features: &[f64], out: &mut [f64]) {
        let nf = self.center.len();
        let p = self.basis.len();
        let z: Vec<f64> = (0..nf).map(|j| (features[j] - self.center[j]) * self.scale[j]).collect();
        let mut row = vec![0.0; p];
        eval_basis(&self.basis, &z, &mut row);
        for c in 0..self.target_dim {
            out[c] = (0..p).map(|a| row[a] * self.coef[a * self.target_dim + c]).sum();
        }
    }

    pub fn predict(&self, features: &[&ParticleEnsemble]) -> Result<ParticleEnsemble> {
        let (n, nf, data) = flatten_features(features)?;
        if nf != self.center.len() {
            return Err(Error::ShapeMismatch("feature count differs from fit".into()));
        }
        let mut out = ParticleEnsemble::zeros(n, self.target_dim);
        for i in 0..n {
            self.predict_point(&data[i * nf..(i + 1) * nf], out.particle_mut(i));
        }
        Ok(out)
    }
}

/// Fit and evaluate on the same particles: the projection Ê[target | features].
pub fn project(features: &[&ParticleEnsemble], target: &ParticleEnsemble, spec: &RegressionSpec, step: usize) -> Result<ParticleEnsemble> {
    Fit::new(features, target, spec, step)?.predict(features)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn monomial_counts() {
        assert_eq!(monomials(1, 2).len(), 3);
        assert_eq!(monomials(2, 2).len(), 6);
        assert_eq!(monomials(3, 2).len(), 10);
        assert_eq!(monomials(2, 3).len(), 10);
    }

    #[test]
    fn reproduces_quadratic_targets_exactly() {
        let x = ParticleEnsemble::gaussian(500, 2, 0.3, 1.5, 4);
        let t = crate::ensemble::push_forward(&x, |p, o| o[0] = 1.0 + 2.0 * p[0] - p[1] + 0.5 * p[0] * p[1]).unwrap();
        let t = ParticleEnsemble::from_samples(1, t.samples().iter().step_by(2).copied().collect()).unwrap();
        let spec = RegressionSpec { ridge: 0.0, ..Default::default() };
        let fit = project(&[&x], &t, &spec, 0).unwrap();
        for (a, b) in fit.samples().iter().zip(t.samples()) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn constant_features_are_dropped() {
        let x = ParticleEnsemble::constant(50, &[2.0]);
        let t = ParticleEnsemble::gaussian(50, 1, 1.0, 1.0, 2);
        let spec = RegressionSpec { ridge: 0.0, ..Default::default() };
        let fit = Fit::new(&[&x], &t, &spec, 0).unwrap();
        assert_eq!(fit.n_basis(), 1);
        let p = fit.predict(&[&x]).unwrap();
        assert!((p.samples()[0] - t.mean_vector()[0]).abs() < 1e-12);
    }

    #[test]
    fn degree_zero_is_rejected() {
        let x = ParticleEnsemble::gaussian(10, 1, 0.0, 1.0, 2);
        let spec = RegressionSpec { degree: 0, ..Default::default() };
        assert!(Fit::new(&[&x], &x, &spec, 0).is_err());
    }
}
