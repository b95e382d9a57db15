use mfc_lab::ensemble::{brownian_lattice, brownian_lattice_with, h_inner, LatticeSampling, ParticleEnsemble, PathLattice, TimeGrid};
use approx::assert_abs_diff_eq;
use mfc_lab::fbsde::{gaussian_probe, solve_lq_derivative, solve_optimal, upsilon_action, PicardConfig, Problem};
use mfc_lab::functionals::{eval_f, grad_f, Functional, ProblemSpec};
use mfc_lab::regression::RegressionSpec;
use mfc_lab::riccati::LqRiccati;
use mfc_lab::value::*;

fn grid(n: usize) -> TimeGrid {
    TimeGrid::new(0.0, 1.0, n).unwrap()
}

fn problem(running: Functional, terminal: Functional, sigma: f64, g: TimeGrid) -> Problem {
    let dim = terminal.dim;
    Problem::new(running, terminal, ProblemSpec::isotropic(1.0, sigma, dim, g).unwrap()).unwrap()
}

fn lq(sigma: f64, dim: usize, g: TimeGrid) -> Problem {
    problem(Functional::zero(dim), Functional::half_square(dim, 1.0), sigma, g)
}

fn riccati(sigma: f64, dim: usize) -> LqRiccati {
    LqRiccati { lambda: 1.0, terminal_weight: 1.0, sigma, dim, t_end: 1.0 }
}

fn mean_coupled(dim: usize) -> Functional {
    let d2 = dim * dim;
    let eye: Vec<f64> = (0..d2).map(|k| if k % (dim + 1) == 0 { 1.0 } else { 0.0 }).collect();
    Functional::quadratic(dim, eye.clone(), vec![0.2; dim], eye.iter().map(|v| 0.3 * v).collect(), 0.1).unwrap()
}

fn cfg(tol: f64, degree: usize) -> ValueConfig {
    ValueConfig {
        picard: PicardConfig { tol, regression: RegressionSpec { degree, ..Default::default() }, ..Default::default() },
        ..Default::default()
    }
}

/// Non-convex terminal cost whose discrete control problem stays convex: λ > c′_T·T.
fn mild_stress() -> Functional {
    Functional::stress(1, 0.25, 0.1, 0.25).unwrap()
}

fn xg(n: usize, dim: usize, seed: u64) -> ParticleEnsemble {
    ParticleEnsemble::gaussian(n, dim, 0.2, 1.0, seed)
}

fn orthogonal(g: TimeGrid, x: &ParticleEnsemble, seed: u64) -> PathLattice {
    brownian_lattice_with(g, x.n_particles(), x.dim(), seed, LatticeSampling::Orthogonal, &[x]).unwrap()
}

#[test]
fn value_examples() {
    let g = grid(16);
    let x = xg(256, 1, 1);
    let lat = brownian_lattice(g, 256, 1, 2).unwrap();
    let zero = problem(Functional::zero(1), Functional::zero(1), 0.5, g);
    let r = value(&zero, &x, &lat, &cfg(1e-10, 2)).unwrap();
    assert_eq!((r.value, r.gradient.norm(), r.probe_quadratic), (0.0, 0.0, 0.0));

    let x = x.scaled(1.0 / x.norm());
    let r = value(&lq(0.0, 1, g), &x, &lat, &cfg(1e-12, 2)).unwrap();
    assert_abs_diff_eq!(r.value, 0.25, epsilon = 1e-10);
    assert!(r.gradient.lin_comb(1.0, &x, -0.5).unwrap().norm() < 1e-10);
}

#[test]
fn noisy_lq_value_matches_riccati() {
    let g = grid(32);
    let n = 4096;
    let x = xg(n, 2, 5);
    let lat = orthogonal(g, &x, 6);
    let r = value(&lq(0.5, 2, g), &x, &lat, &cfg(1e-10, 1)).unwrap();
    let exact = riccati(0.5, 2).value(0.0, x.norm().powi(2));
    // Left-endpoint quadrature of the noise integral is first order in dt.
    assert!((r.value - exact).abs() <= 2.0 * g.dt() * 0.25 + 5.0 * r.standard_error, "{} vs {exact}", r.value);
    let p0 = riccati(0.5, 2).p(0.0);
    assert!((r.probe_quadratic - 0.25 * 2.0 * p0).abs() <= 1e-6, "{}", r.probe_quadratic);
}

#[test]
fn gradient_is_a_function_of_the_sample_and_grows_linearly() {
    const GROWTH: f64 = 2.0;
    let g = grid(8);
    let n = 512;
    for f in [Functional::half_square(1, 1.0), mean_coupled(1), mild_stress()] {
        let p = problem(Functional::zero(1), f, 0.0, g);
        let lat = brownian_lattice(g, n, 1, 1).unwrap();
        for scale in [0.1, 1.0, 10.0] {
            let mut x = ParticleEnsemble::gaussian(n, 1, 0.3 * scale, scale, 2);
            let first = x.particle(0).to_vec();
            x.particle_mut(7).copy_from_slice(&first);
            let r = value(&p, &x, &lat, &cfg(1e-10, 2)).unwrap();
            assert_eq!(r.gradient.particle(0), r.gradient.particle(7));
            assert!(r.gradient.norm() <= GROWTH * (1.0 + x.norm()), "{}", p.terminal.name);
            assert!(r.value.abs() <= GROWTH * (1.0 + x.norm().powi(2)), "{}", p.terminal.name);
        }
    }
}

#[test]
fn finite_difference_gradient_checks() {
    let g = grid(16);
    let n = 4096;
    let x = xg(n, 1, 3);
    let lat = brownian_lattice(g, n, 1, 4).unwrap();
    let c = cfg(1e-10, 2);
    let r = gradient_fd_check(&lq(0.5, 1, g), &x, &lat, &c, 1e-3, 0, 9).unwrap();
    assert!(r <= 1e-3, "lq {r}");
    // The orthogonal lattice with an affine basis makes the conditional expectation exact.
    let r = gradient_fd_check(&lq(0.5, 1, g), &x, &orthogonal(g, &x, 4), &cfg(1e-10, 1), 1e-3, 0, 9).unwrap();
    assert!(r <= 1e-9, "orthogonal lq {r}");
    // Directions independent of X move the regression features off their own span,
    // which costs a first-order bias of size N^(-1/2).
    let r = gradient_fd_check(&lq(0.5, 1, g), &x, &lat, &c, 1e-3, 2, 9).unwrap();
    assert!(r <= 0.5 / (n as f64).sqrt(), "random directions {r}");
    let zero = problem(Functional::zero(1), Functional::zero(1), 0.5, g);
    assert!(gradient_fd_check(&zero, &x, &lat, &c, 1e-3, 1, 9).unwrap() <= 1e-14);
    let p = problem(mean_coupled(1), mean_coupled(1), 0.5, g);
    let r = gradient_fd_check(&p, &x, &lat, &c, 1e-3, 2, 9).unwrap();
    assert!(r <= 5e-3, "mean coupled {r}");
}

#[test]
fn dynamic_programming_examples() {
    let g = grid(16);
    let n = 4096;
    let x = xg(n, 1, 3);
    let lat = brownian_lattice(g, n, 1, 4).unwrap();
    let c = cfg(1e-10, 2);
    let p = lq(0.5, 1, g);
    assert_eq!(dpp_check(&p, &x, &lat, &c, 0).unwrap().residual, 0.0);
    assert!(dpp_check(&p, &x, &lat, &c, 16).unwrap().residual <= 1e-10);
    let r = dpp_check(&p, &x, &lat, &c, 4).unwrap();
    assert!(r.residual <= 2e-3 * (1.0 + x.norm().powi(2)), "{}", r.residual);
    assert_eq!(r.h, 0.25);
    assert!(dpp_check(&p, &x, &lat, &c, 17).is_err());
    let q = problem(mean_coupled(1), mild_stress(), 0.5, g);
    let r = dpp_check(&q, &x, &lat, &c, 8).unwrap();
    assert!(r.residual <= 2e-3 * (1.0 + x.norm().powi(2)), "{}", r.residual);
}

#[test]
fn terminal_value_and_gradient_are_the_terminal_cost() {
    let g = grid(8);
    let x = xg(128, 2, 3);
    let lat = brownian_lattice(g, 128, 2, 4).unwrap();
    let f = mean_coupled(2);
    let p = problem(Functional::zero(2), f.clone(), 0.5, g);
    let r = value_from_step(&p, &x, &lat, 8, &cfg(1e-10, 2)).unwrap();
    assert!((r.value - eval_f(&f, &x).unwrap()).abs() <= 1e-12);
    assert!(r.gradient.sub(&grad_f(&f, &x).unwrap()).unwrap().norm() <= 1e-12);
}

#[test]
fn bellman_residual_without_costs_is_zero() {
    let g = grid(16);
    let x = xg(512, 1, 3);
    let lat = brownian_lattice(g, 512, 1, 4).unwrap();
    let zero = problem(Functional::zero(1), Functional::zero(1), 0.5, g);
    let r = bellman_residual(&zero, &x, &lat, &cfg(1e-10, 2), &[2, 4, 8]).unwrap();
    assert!(r.samples.iter().all(|s| s.residual == 0.0));
    assert_eq!(r.kind, ResidualKind::Bellman);
}

#[test]
fn noiseless_bellman_residual_vanishes_with_h() {
    let g = grid(64);
    let x = xg(512, 1, 3);
    let lat = brownian_lattice(g, 512, 1, 4).unwrap();
    for p in [lq(0.0, 1, g), problem(mean_coupled(1), mild_stress(), 0.0, g)] {
        let r = bellman_residual(&p, &x, &lat, &cfg(1e-11, 2), &[2, 4, 8]).unwrap();
        let rate = r.rate_estimate.unwrap();
        assert!(rate >= 0.5, "{}: rate {rate} {:?}", p.terminal.name, r.samples);
        assert!(r.residual <= 0.05, "{}: {}", p.terminal.name, r.residual);
    }
}

#[test]
fn noisy_lq_bellman_residual_with_orthogonal_lattice() {
    let g = grid(32);
    let n = 4096;
    let x = xg(n, 1, 7);
    let lat = orthogonal(g, &x, 11);
    let r = bellman_residual(&lq(0.5, 1, g), &x, &lat, &cfg(1e-10, 1), &[2, 4, 8]).unwrap();
    assert!(r.residual <= 1e-2, "{:?}", r.samples);
    assert!(r.rate_estimate.unwrap() >= 0.5, "{:?}", r.rate_estimate);
}

#[test]
fn master_residual_examples() {
    let g = grid(32);
    let x = xg(256, 1, 3);
    let lat = brownian_lattice(g, 256, 1, 4).unwrap();
    let c = cfg(1e-11, 2);
    let dirs = MasterDirections::spread(256, 8);
    let zero = problem(Functional::zero(1), Functional::zero(1), 0.5, g);
    assert_eq!(master_residual(&zero, &x, &lat, &c, 2, &dirs).unwrap().residual, 0.0);
    let r = master_residual(&lq(0.0, 1, g), &x, &lat, &c, 2, &dirs).unwrap();
    assert!(r.residual <= 2e-3, "{}", r.residual);
    assert!(master_residual(&lq(0.0, 1, g), &x, &lat, &c, 17, &dirs).is_err());
    let bad = MasterDirections { particles: vec![999], include_gradient: false };
    assert!(master_residual(&lq(0.0, 1, g), &x, &lat, &c, 2, &bad).is_err());
}

#[test]
fn time_regularity_examples() {
    let g = grid(16);
    let x = xg(512, 1, 3);
    let lat = brownian_lattice(g, 512, 1, 4).unwrap();
    let c = cfg(1e-12, 2);
    let p = lq(0.0, 1, g);
    let r = time_regularity(&p, &x, &lat, &c, &[(0, 0)]).unwrap();
    assert_eq!(r.residual, 0.0);
    let zero = problem(Functional::zero(1), Functional::zero(1), 0.5, g);
    let r = time_regularity(&zero, &x, &lat, &c, &[(0, 2), (0, 4), (0, 8)]).unwrap();
    assert_eq!(r.residual, 0.0);
    assert_eq!(r.rate_estimate, None);

    let ric = riccati(0.0, 1);
    let pairs = [(0, 1), (0, 2), (0, 4), (0, 8)];
    let r = time_regularity(&p, &x, &lat, &c, &pairs).unwrap();
    let xn2 = x.norm().powi(2);
    for (s, &(k1, k2)) in r.samples.iter().zip(&pairs) {
        let exact = 0.5 * (ric.p(g.time(k2)) - ric.p(g.time(k1))).abs() * xn2 / ((1.0 + xn2) * s.h);
        assert!((s.residual - exact).abs() <= 1e-9, "{} vs {exact}", s.residual);
    }
    assert!(r.rate_estimate.unwrap() >= 0.95, "{:?}", r.rate_estimate);
    assert!(r.secondary_rate.unwrap() >= 0.5, "{:?}", r.secondary_rate);
}

#[test]
fn noisy_time_regularity_rates() {
    let g = grid(32);
    let x = xg(2048, 1, 3);
    let lat = brownian_lattice(g, 2048, 1, 4).unwrap();
    let p = problem(mean_coupled(1), mild_stress(), 0.5, g);
    let r = time_regularity(&p, &x, &lat, &cfg(1e-10, 2), &[(0, 2), (0, 4), (0, 8), (0, 16)]).unwrap();
    assert!(r.rate_estimate.unwrap() >= 0.9, "{:?}", r.rate_estimate);
    assert!(r.secondary_rate.unwrap() >= 0.45, "{:?}", r.secondary_rate);
}

#[test]
fn value_depends_only_on_the_law() {
    let g = grid(16);
    let n = 4096;
    let x = xg(n, 1, 3);
    let lat = brownian_lattice(g, n, 1, 4).unwrap();
    let c = cfg(1e-10, 2);
    let p = lq(0.5, 1, g);
    let cnp = ValueConfig { with_probe: false, ..c };
    let id: Vec<usize> = (0..n).collect();
    assert_eq!(value(&p, &x.permuted(&id), &lat, &cnp).unwrap(), value(&p, &x, &lat, &cnp).unwrap());
    let r = law_invariance_check(&p, &x, &lat, &c, 10, 5).unwrap();
    assert!(r.max_abs_diff <= 3.0 * r.standard_error, "{r:?}");
    let quiet = problem(mean_coupled(1), mild_stress(), 0.0, g);
    let small = xg(512, 1, 3);
    let lat = brownian_lattice(g, 512, 1, 4).unwrap();
    let r = law_invariance_check(&quiet, &small, &lat, &c, 10, 5).unwrap();
    assert!(r.max_abs_diff <= 1e-10, "{r:?}");
}

#[test]
fn gradient_is_lipschitz_in_the_ensemble() {
    // Constant fitted once over these problems and pairs, then frozen.
    const LIPSCHITZ: f64 = 1.5;
    let g = grid(8);
    let n = 512;
    let lat = brownian_lattice(g, n, 1, 4).unwrap();
    let c = ValueConfig { with_probe: false, ..cfg(1e-10, 2) };
    for p in [lq(0.5, 1, g), problem(mean_coupled(1), mild_stress(), 0.5, g)] {
        for t in 0..5u64 {
            let x1 = ParticleEnsemble::gaussian(n, 1, 0.0, 1.0, 10 + t);
            let x2 = x1.lin_comb(1.0, &ParticleEnsemble::gaussian(n, 1, 0.1, 0.5, 20 + t), 1.0).unwrap();
            let g1 = value(&p, &x1, &lat, &c).unwrap().gradient;
            let g2 = value(&p, &x2, &lat, &c).unwrap().gradient;
            let ratio = g1.sub(&g2).unwrap().norm() / x1.sub(&x2).unwrap().norm();
            assert!(ratio <= LIPSCHITZ, "{} pair {t}: {ratio}", p.terminal.name);
        }
    }
}

#[test]
fn second_derivative_is_self_adjoint() {
    let g = grid(8);
    let n = 512;
    let x = xg(n, 1, 3);
    let lat = brownian_lattice(g, n, 1, 4).unwrap();
    let pc = PicardConfig { tol: 1e-12, ..Default::default() };
    for p in [lq(0.5, 1, g), problem(mean_coupled(1), mild_stress(), 0.0, g)] {
        let sol = solve_optimal(&p, &x, &lat, &pc).unwrap();
        let pc = PicardConfig { tol: 1e-10, ..pc };
        let a = ParticleEnsemble::gaussian(n, 1, 0.0, 1.0, 8).lin_comb(1.0, &x, 0.5).unwrap();
        let b = x.map_values(|v| v * v - 1.0);
        let ua = upsilon_action(&sol, &p, &solve_lq_derivative(&sol, &p, &a, &pc).unwrap()).unwrap();
        let ub = upsilon_action(&sol, &p, &solve_lq_derivative(&sol, &p, &b, &pc).unwrap()).unwrap();
        let (ab, ba) = (h_inner(&ua, &b).unwrap(), h_inner(&ub, &a).unwrap());
        assert!((ab - ba).abs() <= 1e-8 * (1.0 + ab.abs()), "{}: {ab} vs {ba}", p.terminal.name);
    }
}

#[test]
fn second_order_expansion_remainder_vanishes() {
    let g = grid(8);
    let n = 512;
    let x = xg(n, 1, 3);
    let lat = brownian_lattice(g, n, 1, 4).unwrap();
    let c = cfg(1e-12, 2);
    let dir = ParticleEnsemble::gaussian(n, 1, 0.0, 1.0, 8);
    let lqr = second_order_expansion(&lq(0.0, 1, g), &x, &lat, &c, &dir, &[0.1, 0.05]).unwrap();
    assert!(lqr.iter().all(|s| s.residual <= 1e-8), "{lqr:?}");
    let p = problem(Functional::zero(1), mild_stress(), 0.0, g);
    let eps = [0.2, 0.1, 0.05, 0.025];
    let r = second_order_expansion(&p, &x, &lat, &c, &dir, &eps).unwrap();
    let hs: Vec<f64> = r.iter().map(|s| s.h.ln()).collect();
    let rs: Vec<f64> = r.iter().map(|s| s.residual.ln()).collect();
    let mh = hs.iter().sum::<f64>() / 4.0;
    let mr = rs.iter().sum::<f64>() / 4.0;
    let slope = hs.iter().zip(&rs).map(|(a, b)| (a - mh) * (b - mr)).sum::<f64>() / hs.iter().map(|a| (a - mh).powi(2)).sum::<f64>();
    assert!(slope >= 0.9, "rate {slope}: {r:?}");
}

#[test]
fn probe_value_is_stable_across_seeds() {
    let g = grid(8);
    let n = 4096;
    let x = xg(n, 1, 3);
    let lat = brownian_lattice(g, n, 1, 4).unwrap();
    let pc = PicardConfig { tol: 1e-10, regression: RegressionSpec { degree: 1, ..Default::default() }, ..Default::default() };
    let p = lq(1.0, 1, g);
    let sol = solve_optimal(&p, &x, &lat, &pc).unwrap();
    let vals: Vec<f64> = (0..10u64).map(|s| gaussian_probe(&sol, &p, &pc, 100 + s).unwrap()).collect();
    let m = vals.iter().sum::<f64>() / 10.0;
    let sd = (vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 9.0).sqrt();
    // One probe estimates P‖N‖², whose standard error is P·sqrt(2/N).
    let se = riccati(1.0, 1).p(0.0) * (2.0 / n as f64).sqrt();
    assert!(sd <= 3.0 * se, "{sd} vs {se}: {vals:?}");
}
