use mfc_lab::ensemble::*;
use mfc_lab::rng;
use proptest::prelude::*;

fn ensemble(dim: usize, max_n: usize) -> impl Strategy<Value = ParticleEnsemble> {
    (2..=max_n).prop_flat_map(move |n| {
        prop::collection::vec(-5.0f64..5.0, n * dim).prop_map(move |s| ParticleEnsemble::from_samples(dim, s).unwrap())
    })
}

fn ensemble_n(n: usize, dim: usize) -> impl Strategy<Value = ParticleEnsemble> {
    prop::collection::vec(-5.0f64..5.0, n * dim).prop_map(move |s| ParticleEnsemble::from_samples(dim, s).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn exact_w2_is_symmetric_and_satisfies_triangle(
        (a, b, c) in (2usize..=24, 1usize..=2).prop_flat_map(|(n, d)| (ensemble_n(n, d), ensemble_n(n, d), ensemble_n(n, d)))
    ) {
        let ab = wasserstein2_exact_small(&a.law(), &b.law()).unwrap();
        let ba = wasserstein2_exact_small(&b.law(), &a.law()).unwrap();
        let bc = wasserstein2_exact_small(&b.law(), &c.law()).unwrap();
        let ac = wasserstein2_exact_small(&a.law(), &c.law()).unwrap();
        prop_assert!((ab - ba).abs() <= 1e-12 * (1.0 + ab));
        prop_assert!(ac <= ab + bc + 1e-10);
        prop_assert!(wasserstein2_exact_small(&a.law(), &a.law()).unwrap() <= 1e-12);
    }

    #[test]
    fn quantile_coupling_matches_exact_assignment(
        (a, b) in (2usize..=64).prop_flat_map(|n| (ensemble_n(n, 1), ensemble_n(n, 1)))
    ) {
        let q = wasserstein2_1d(&a.law(), &b.law()).unwrap();
        let e = wasserstein2_exact_small(&a.law(), &b.law()).unwrap();
        prop_assert!((q - e).abs() <= 1e-12, "{} vs {}", q, e);
    }

    #[test]
    fn law_statistics_are_permutation_invariant(x in ensemble(2, 40), seed in any::<u64>()) {
        let p = x.permuted(&rng::permutation(x.n_particles(), seed));
        let (lx, lp) = (x.law(), p.law());
        prop_assert_eq!(wasserstein2_exact_small(&lx, &lp).unwrap(), 0.0);
        prop_assert_eq!(&lx, &lp);
        prop_assert_eq!(lp.second_moment(), lx.second_moment());
        prop_assert_eq!(lp.mean(), lx.mean());
        prop_assert_eq!(lp.covariance(), lx.covariance());
    }

    #[test]
    fn permuted_1d_law_is_at_distance_zero(x in ensemble(1, 200), seed in any::<u64>()) {
        let cp = independent_copy(&x, seed).unwrap();
        prop_assert_eq!(wasserstein2_1d(&x.law(), &cp.law()).unwrap(), 0.0);
    }

    #[test]
    fn inner_product_is_symmetric_and_bilinear(
        (x, y, z) in (2usize..50, 1usize..=3).prop_flat_map(|(n, d)| (ensemble_n(n, d), ensemble_n(n, d), ensemble_n(n, d))),
        a in -3.0f64..3.0,
    ) {
        let xy = h_inner(&x, &y).unwrap();
        prop_assert!((xy - h_inner(&y, &x).unwrap()).abs() <= 1e-12 * (1.0 + xy.abs()));
        let lhs = h_inner(&x.lin_comb(a, &z, 1.0).unwrap(), &y).unwrap();
        let rhs = a * xy + h_inner(&z, &y).unwrap();
        prop_assert!((lhs - rhs).abs() <= 1e-10 * (1.0 + lhs.abs()));
    }

    #[test]
    fn csv_round_trip_is_lossless(x in ensemble(3, 30)) {
        let mut buf = Vec::new();
        x.write_csv(&mut buf).unwrap();
        let back = ParticleEnsemble::read_csv(buf.as_slice()).unwrap();
        prop_assert_eq!(back.samples(), x.samples());
    }

    #[test]
    fn csv_reader_never_panics(s in ".{0,200}") {
        let _ = ParticleEnsemble::read_csv(s.as_bytes());
    }
}

#[test]
fn lattice_replay_is_bit_identical() {
    let g = TimeGrid::new(0.0, 1.0, 16).unwrap();
    let a = brownian_lattice(g, 64, 2, 42).unwrap();
    let b = brownian_lattice(g, 64, 2, 42).unwrap();
    let bits = |l: &PathLattice| l.increments().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
    let c = brownian_lattice(g, 64, 2, 43).unwrap();
    assert_ne!(bits(&a), bits(&c));
}

#[test]
fn lattice_increment_variance_is_dt_within_mc_error() {
    let g = TimeGrid::new(0.0, 1.0, 10).unwrap();
    let n = 100_000;
    let lat = brownian_lattice(g, n, 1, 11).unwrap();
    let dt = g.dt();
    for k in 0..g.n_steps {
        let inc = lat.increment(k);
        let mean = inc.iter().sum::<f64>() / n as f64;
        let var = inc.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        assert!((var - dt).abs() <= 5.0 * dt / (n as f64).sqrt(), "step {k}: {var}");
        assert!(mean.abs() <= 5.0 * (dt / n as f64).sqrt());
    }
}

#[test]
fn lattice_rejects_degenerate_shapes() {
    let g = TimeGrid::new(0.0, 1.0, 4).unwrap();
    assert!(brownian_lattice(g, 1, 1, 0).is_err());
    assert!(brownian_lattice(g, 4, 0, 0).is_err());
}

#[test]
fn orthogonal_lattice_has_exact_second_moments() {
    let g = TimeGrid::new(0.0, 1.0, 8).unwrap();
    let x = ParticleEnsemble::gaussian(256, 1, 0.0, 1.0, 3);
    let lat = brownian_lattice_with(g, 256, 1, 5, LatticeSampling::Orthogonal, &[&x]).unwrap();
    let dt = g.dt();
    for k in 0..8 {
        let a = ParticleEnsemble::from_samples(1, lat.increment(k).to_vec()).unwrap();
        assert!((a.norm().powi(2) - dt).abs() < 1e-12);
        assert!(h_inner(&a, &x).unwrap().abs() < 1e-12);
        assert!(a.mean_vector()[0].abs() < 1e-12);
        for j in 0..k {
            let b = ParticleEnsemble::from_samples(1, lat.increment(j).to_vec()).unwrap();
            assert!(h_inner(&a, &b).unwrap().abs() < 1e-12);
        }
    }
}

#[test]
fn independent_copy_decorrelates_pairs() {
    let n = 20_000;
    let x = ParticleEnsemble::gaussian(n, 1, 1.5, 1.0, 8);
    let cp = independent_copy(&x, 77).unwrap();
    let m = x.mean_vector()[0];
    let cross = h_inner(&x, &cp).unwrap();
    let var = x.covariance()[0];
    assert!((cross - m * m).abs() <= 5.0 * var / (n as f64).sqrt());
    assert_eq!(independent_copy(&x, 77).unwrap(), cp);
}

#[test]
fn grid_end_point_is_exact() {
    let g = TimeGrid::new(0.1, 0.7, 3).unwrap();
    assert_eq!(g.time(3), 0.7);
    for k in 0..3 {
        assert!(g.time(k) < g.time(k + 1));
    }
    assert!(TimeGrid::new(0.0, 1.0, 0).is_err());
    assert!(TimeGrid::new(1.0, 1.0, 4).is_err());
}
