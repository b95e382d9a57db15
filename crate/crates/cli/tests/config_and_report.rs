//! Config parsing, validation defaults and report serialization.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use mfc_lab::ensemble::{LatticeSampling, TimeGrid};
use mfc_lab_cli::config::{self, CheckConfig, FunctionalConfig, Sigma};
use mfc_lab_cli::report::{diff, CheckOutcome, Meta, RunReport, SolverSection, Status, ValueSection, SCHEMA_VERSION};
use proptest::prelude::*;

fn repo() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

const MINIMAL: &str = r#"
[problem]
running = { name = "zero" }
terminal = { name = "half_square" }
lambda = 1.0
dim = 1
T = 1.0

[discretization]
n_steps = 8
n_particles = 16
seed = 1
"#;

#[test]
fn every_checked_in_config_parses_and_prepares() {
    let mut n = 0;
    for sub in ["configs/acceptance", "configs/examples"] {
        for e in std::fs::read_dir(repo().join(sub)).unwrap() {
            let p = e.unwrap().path();
            let text = std::fs::read_to_string(&p).unwrap();
            if p.extension().is_some_and(|x| x == "toml") && !text.contains("[[run]]") {
                let l = config::load(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
                l.config.prepare(&l.base_dir).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
                n += 1;
            }
        }
    }
    assert!(n >= 17, "{n}");
}

#[test]
fn check_defaults_are_the_acceptance_tolerances() {
    let parse_check = |body: &str| -> CheckConfig {
        let c = config::parse(&format!("{MINIMAL}\n[[checks]]\n{body}\n")).unwrap();
        c.checks.into_iter().next().unwrap()
    };
    assert_eq!(parse_check("check = \"gradient_fd\""), CheckConfig::GradientFd { step: 1e-4, n_random: 0, tol: 1e-3 });
    assert_eq!(parse_check("check = \"bellman\""), CheckConfig::Bellman { steps: vec![2, 4, 8], tol: 5e-3, min_rate: 0.4 });
    assert_eq!(
        parse_check("check = \"master\""),
        CheckConfig::Master { steps: 2, n_directions: 8, tol: 5e-3, terminal_tol: 1e-12 }
    );
    assert_eq!(
        parse_check("check = \"riccati\""),
        CheckConfig::Riccati { n_directions: 5, value_tol: 1e-2, gradient_tol: 1e-2, second_tol: 2e-2 }
    );
    assert_eq!(parse_check("check = \"monotonicity\""), CheckConfig::Monotonicity { n_pairs: 50, tol: 1e-8 });
    assert_eq!(parse_check("check = \"energy_identity\""), CheckConfig::EnergyIdentity { tol: 1e-2 });
    assert_eq!(parse_check("check = \"wasserstein\""), CheckConfig::Wasserstein { n_pairs: 50, max_atoms: 512, tol: 1e-12 });
    assert_eq!(
        parse_check("check = \"correspondence\""),
        CheckConfig::Correspondence { n_triples: 100, symmetry_tol: 1e-10, grad_tol: 1e-4, taylor_tol: 1e-10, gamma_tol: 1e-12 }
    );
    match parse_check("check = \"hjbfp_compare\"") {
        CheckConfig::HjbfpCompare { nx, riccati_tol, value_tol, gradient_tol, mass_tol, .. } => {
            assert_eq!((nx, riccati_tol, value_tol, gradient_tol, mass_tol), (401, 1e-3, 2e-2, 5e-3, 1e-12));
        }
        other => panic!("{other:?}"),
    }
    assert_eq!(parse_check("check = \"dpp\"\nh = 0.25"), CheckConfig::Dpp { h: 0.25, tol: 5e-3 });
}

#[test]
fn unknown_keys_are_rejected_in_every_section() {
    let cases = [
        MINIMAL.replace("dim = 1", "dim = 1\nextra = 0"),
        MINIMAL.replace("seed = 1", "seed = 1\nthreads = 4"),
        format!("{MINIMAL}\n[solver]\nmax_iter = 10\n"),
        format!("{MINIMAL}\n[solver]\nregression = {{ degre = 1 }}\n"),
        format!("{MINIMAL}\n[initial]\nkind = \"gaussian\"\nvariance = 1.0\n"),
        format!("{MINIMAL}\n[output]\npath = \"x\"\n"),
        format!("{MINIMAL}\n[[checks]]\ncheck = \"dpp\"\nh = 0.25\ntolerance = 1\n"),
        format!("{MINIMAL}\n[[checks]]\ncheck = \"hjbfp_compare\"\nfixed_point = {{ dampign = 0.5 }}\n"),
        MINIMAL.replace("{ name = \"half_square\" }", "{ name = \"half_square\", wieght = 2.0 }"),
        MINIMAL.replace("{ name = \"zero\" }", "{ name = \"stress\", alpha = 1.0, beta = 0.0, gamma = 0.0, mixed = { mode = \"double_sum\", n = 3 } }"),
        format!("{MINIMAL}\n[[checks]]\ncheck = \"plot\"\n"),
    ];
    for (i, text) in cases.iter().enumerate() {
        assert!(matches!(config::parse(text), Err(config::ConfigError::Parse(_))), "case {i}");
    }
}

#[test]
fn sigma_accepts_scalar_and_matrix() {
    let c = config::parse(&MINIMAL.replace("dim = 1", "dim = 1\nsigma = 0.5")).unwrap();
    assert_eq!(c.problem.sigma, Sigma::Scalar(0.5));
    let text = MINIMAL.replace("dim = 1", "dim = 2\nsigma = [0.5, 0.0, 0.1, 0.4]").replace("half_square\" }", "half_square\", weight = 2.0 }");
    let c = config::parse(&text).unwrap();
    assert_eq!(c.problem.sigma, Sigma::Matrix(vec![0.5, 0.0, 0.1, 0.4]));
    assert_eq!(c.problem.terminal, FunctionalConfig::HalfSquare { weight: 2.0 });
    assert!(c.prepare(Path::new(".")).is_ok());
    let wrong = config::parse(&text.replace("[0.5, 0.0, 0.1, 0.4]", "[0.5, 0.0, 0.1]")).unwrap();
    assert!(matches!(wrong.prepare(Path::new(".")), Err(config::ConfigError::Invalid(_))));
}

#[test]
fn config_echo_round_trips_through_toml() {
    let l = config::load(&repo().join("configs/acceptance/hjbfp_noisy_lq.toml")).unwrap();
    let text = toml::to_string(&l.config).unwrap();
    assert_eq!(config::parse(&text).unwrap(), l.config);
}

#[test]
fn csv_initial_data_must_match_the_declared_shape() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("x.csv"), "particle_index,x_0\n0,0.1\n1,0.2\n").unwrap();
    let base = MINIMAL.replace("n_particles = 16", "n_particles = 2");
    let ok = config::parse(&format!("{base}\n[initial]\nkind = \"csv\"\npath = \"x.csv\"\n")).unwrap();
    assert_eq!(ok.prepare(dir.path()).unwrap().x.samples(), &[0.1, 0.2]);
    let wrong = config::parse(&format!("{MINIMAL}\n[initial]\nkind = \"csv\"\npath = \"x.csv\"\n")).unwrap();
    assert!(matches!(wrong.prepare(dir.path()), Err(config::ConfigError::Invalid(_))));
    let missing = config::parse(&format!("{base}\n[initial]\nkind = \"csv\"\npath = \"y.csv\"\n")).unwrap();
    assert!(matches!(missing.prepare(dir.path()), Err(config::ConfigError::Read { .. })));
}

fn sample_report(value: f64, metrics: Vec<(String, f64)>, passed: bool) -> RunReport {
    let cfg = config::parse(MINIMAL).unwrap();
    let mut check = CheckOutcome::new("dpp");
    for (k, v) in metrics {
        check.at_most(&k, v, 1.0);
    }
    check.passed = passed;
    RunReport {
        schema_version: SCHEMA_VERSION,
        name: "sample".into(),
        config: cfg,
        lambda_t: Some(1.0),
        status: if passed { Status::Passed } else { Status::CheckFailed },
        solver: SolverSection { iterations: 3, final_gap: 1e-12, failure: None },
        value: Some(ValueSection { value, standard_error: 0.0, gradient_norm: 0.5, x_norm2: 1.0 }),
        checks: vec![check],
        meta: Meta {
            mfc_lab_version: "0".into(),
            cli_version: "0".into(),
            lattice: LatticeSampling::Iid,
            timings_ms: BTreeMap::from([("solve".to_string(), value.abs())]),
        },
    }
}

proptest! {
    #[test]
    fn report_json_round_trips_exactly(
        value in -1e6f64..1e6,
        metrics in proptest::collection::vec(("[a-z]{1,8}", prop_oneof![-1e3f64..1e3, Just(f64::NAN), Just(f64::INFINITY)]), 0..6),
        passed in any::<bool>(),
    ) {
        let r = sample_report(value, metrics, passed);
        let back = RunReport::from_json(&r.to_json()).unwrap();
        prop_assert_eq!(&back, &r);
        prop_assert_eq!(back.to_json(), r.to_json());
    }

    #[test]
    fn diff_ignores_meta_and_finds_every_changed_value(value in -1e3f64..1e3, bump in 1e-9f64..1.0) {
        let a = sample_report(value, vec![("m".into(), value)], true);
        let mut b = a.clone();
        b.meta.timings_ms.insert("solve".into(), value.abs() + 5.0);
        prop_assert!(diff(&a, &b, 0.0).is_empty());
        let moved = value + bump * (1.0 + value.abs());
        b.value.as_mut().unwrap().value = moved;
        b.checks[0].record("m", moved);
        let rows = diff(&a, &b, 0.0);
        prop_assert_eq!(rows.iter().map(|r| r.0.as_str()).collect::<Vec<_>>(), vec!["/checks/0/metrics/m", "/value/value"]);
        prop_assert!(diff(&a, &b, 2.0).is_empty());
    }

    #[test]
    fn whole_step_horizons_are_recognized(n in 1usize..200, k_frac in 0.0f64..1.0) {
        let t = TimeGrid::new(0.0, 1.0, n).unwrap();
        let k = 1 + ((n - 1) as f64 * k_frac) as usize;
        prop_assert_eq!(config::steps_of(k as f64 * t.dt(), &t), Some(k));
        prop_assert_eq!(config::steps_of((k as f64 + 0.5) * t.dt(), &t), None);
    }
}

#[test]
fn reports_with_an_unknown_schema_version_are_rejected() {
    let mut r = sample_report(1.0, vec![], true);
    r.schema_version = SCHEMA_VERSION + 1;
    assert!(RunReport::from_json(&r.to_json()).unwrap_err().contains("schema version"));
}

#[test]
fn residual_table_lists_every_sample() {
    let mut r = sample_report(1.0, vec![], true);
    r.checks[0].residuals.push(mfc_lab::value::ResidualReport {
        kind: mfc_lab::value::ResidualKind::Bellman,
        h: 0.1,
        residual: 0.01,
        rate_estimate: Some(1.0),
        secondary_rate: None,
        samples: vec![
            mfc_lab::value::ResidualSample { h: 0.1, residual: 0.01 },
            mfc_lab::value::ResidualSample { h: 0.2, residual: 0.02 },
        ],
    });
    let t = mfc_lab_cli::report::residual_table(&r);
    let lines: Vec<&str> = t.lines().collect();
    assert_eq!(lines[0], "check,kind,h,residual");
    assert_eq!(lines.len(), 3);
    assert!(lines[2].starts_with("dpp,bellman,2.0"));
}
