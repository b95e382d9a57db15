//! Acceptance gate: runs the checked-in configs and compares report metrics
//! against the stated tolerances. One PASS/FAIL line per criterion.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use mfc_lab::riccati::LqRiccati;
use mfc_lab_cli::report::{diff, RunReport};
use mfc_lab_cli::{run_config, RunOptions, RunResult, EXIT_OK, EXIT_SOLVER_FAILED};

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/acceptance")
}

struct Run {
    result: RunResult,
    elapsed: Duration,
    text: String,
}

fn run(name: &str, out: &Path) -> Run {
    let t = Instant::now();
    let result = run_config(&configs().join(format!("{name}.toml")), &RunOptions { out_dir: Some(out.to_path_buf()), ..Default::default() });
    let elapsed = t.elapsed();
    let text = result.report_path.as_ref().and_then(|p| std::fs::read_to_string(p).ok()).unwrap_or_default();
    Run { result, elapsed, text }
}

impl Run {
    fn report(&self) -> Result<&RunReport, String> {
        self.result.report.as_ref().ok_or_else(|| format!("no report: {:?}", self.result.message))
    }

    fn metric(&self, check: &str, key: &str) -> Result<f64, String> {
        let r = self.report()?;
        let c = r.checks.iter().find(|c| c.name == check).ok_or_else(|| format!("{} has no {check} check", r.name))?;
        c.metrics.get(key).copied().flatten().ok_or_else(|| format!("{check}.{key} missing or not finite"))
    }

    fn failure_kind(&self) -> Option<String> {
        self.result.report.as_ref()?.solver.failure.as_ref().map(|f| f.kind.clone())
    }
}

/// Collects `name=value<=bound` terms; any violated bound fails the criterion.
struct Verdict {
    terms: Vec<String>,
    ok: bool,
}

impl Verdict {
    fn new() -> Self {
        Verdict { terms: vec![], ok: true }
    }

    fn at_most(&mut self, what: &str, value: Result<f64, String>, bound: f64) {
        match value {
            Ok(v) => {
                self.ok &= v <= bound;
                self.terms.push(format!("{what}={v:.3e}<={bound:.2e}"));
            }
            Err(e) => self.fail(&e),
        }
    }

    fn at_least(&mut self, what: &str, value: Result<f64, String>, bound: f64) {
        match value {
            Ok(v) => {
                self.ok &= v >= bound;
                self.terms.push(format!("{what}={v:.3e}>={bound:.2e}"));
            }
            Err(e) => self.fail(&e),
        }
    }

    fn require(&mut self, what: &str, cond: bool) {
        self.ok &= cond;
        self.terms.push(format!("{what}:{}", if cond { "yes" } else { "no" }));
    }

    fn fail(&mut self, why: &str) {
        self.ok = false;
        self.terms.push(why.to_string());
    }
}

fn exit_is(v: &mut Verdict, r: &Run, code: i32) {
    let got = r.result.exit_code;
    v.require(&format!("{} exit {got} (want {code})", r.report().map(|r| r.name.as_str()).unwrap_or("?")), got == code);
}

fn secs(d: Duration) -> Result<f64, String> {
    Ok(d.as_secs_f64())
}

fn main() -> ExitCode {
    // `cargo test -- --list` and filters from other harness-driven targets.
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return ExitCode::SUCCESS;
    }
    let out = tempfile::tempdir().expect("temp dir");
    let out = out.path();
    let start = Instant::now();
    let mut verdicts: Vec<(usize, &str, Verdict)> = Vec::new();

    let lq = run("lq_riccati", out);
    let r = LqRiccati { lambda: 1.0, terminal_weight: 1.0, sigma: 0.0, dim: 1, t_end: 1.0 };
    let mut v = Verdict::new();
    exit_is(&mut v, &lq, EXIT_OK);
    v.require("P(0)=0.5", (r.p(0.0) - 0.5).abs() < 1e-15);
    match lq.report().map(|rep| rep.value.clone()) {
        Ok(Some(val)) => {
            let target = 0.5 * r.p(0.0) * val.x_norm2;
            v.at_most("|V-PX²/2|/(PX²/2)", Ok((val.value - target).abs() / target), 1e-2);
        }
        _ => v.fail("no value"),
    }
    v.at_most("runtime_s", secs(lq.elapsed), 10.0);
    verdicts.push((1, "LQ Riccati value", v));

    let mut v = Verdict::new();
    v.at_most("|Z(0)-P(0)X|/|P(0)X|", lq.metric("riccati", "gradient_relative"), 1e-2);
    v.at_most("second_derivative", lq.metric("riccati", "second_derivative_relative"), 2e-2);
    v.at_most("form_vs_lq_infimum", lq.metric("riccati", "payoff_relative"), 2e-2);
    verdicts.push((2, "LQ Riccati gradient and second derivative", v));

    let bel = run("noisy_lq_bellman", out);
    let mut v = Verdict::new();
    exit_is(&mut v, &bel, EXIT_OK);
    let scale = bel.report().ok().and_then(|r| r.value.as_ref()).map(|x| 1.0 + x.x_norm2).unwrap_or(f64::NAN);
    v.at_most("bellman(2dt)", bel.metric("bellman", "residual"), 5e-3 * scale);
    v.at_least("rate", bel.metric("bellman", "rate"), 0.4);
    verdicts.push((3, "Noisy LQ Bellman residual", v));

    let mas = run("lq_master", out);
    let mut v = Verdict::new();
    exit_is(&mut v, &mas, EXIT_OK);
    v.at_most("master", mas.metric("master", "residual"), 5e-3);
    v.at_most("terminal_identity", mas.metric("master", "terminal_identity"), 1e-12);
    verdicts.push((4, "Master equation residual", v));

    let dpp = run("noisy_lq_dpp", out);
    let mut v = Verdict::new();
    exit_is(&mut v, &dpp, EXIT_OK);
    let scale = dpp.report().ok().and_then(|r| r.value.as_ref()).map(|x| 1.0 + x.x_norm2).unwrap_or(f64::NAN);
    v.at_most("dpp(T/4)", dpp.metric("dpp", "residual"), 5e-3 * scale);
    verdicts.push((5, "Dynamic programming", v));

    let cor = run("correspondence", out);
    let mut v = Verdict::new();
    exit_is(&mut v, &cor, EXIT_OK);
    for role in ["running", "terminal"] {
        v.at_most(&format!("{role}_symmetry"), cor.metric("correspondence", &format!("{role}_symmetry")), 1e-10);
        v.at_most(&format!("{role}_grad_vs_fd"), cor.metric("correspondence", &format!("{role}_grad_vs_fd")), 1e-4);
        v.at_most(&format!("{role}_taylor"), cor.metric("correspondence", &format!("{role}_taylor_residual")), 1e-10);
        v.at_most(&format!("{role}_gamma"), cor.metric("correspondence", &format!("{role}_gamma_consistency")), 1e-12);
    }
    verdicts.push((6, "Correspondence identities", v));

    let mono = run("monotonicity", out);
    let mut v = Verdict::new();
    exit_is(&mut v, &mono, EXIT_OK);
    v.at_least("min_margin", mono.metric("monotonicity", "margin"), -1e-8);
    verdicts.push((7, "Monotonicity", v));

    let mut v = Verdict::new();
    for e in ["energy_lq", "energy_quadratic", "energy_stress"] {
        let r = run(e, out);
        exit_is(&mut v, &r, EXIT_OK);
        let scale = r.report().ok().and_then(|r| r.value.as_ref()).map(|x| 1.0 + x.x_norm2).unwrap_or(f64::NAN);
        v.at_most(&format!("{e}_gap"), r.metric("energy_identity", "gap"), 1e-2 * scale);
    }
    verdicts.push((8, "Energy identity", v));

    let w2 = run("wasserstein", out);
    let mut v = Verdict::new();
    exit_is(&mut v, &w2, EXIT_OK);
    v.at_most("quantile_vs_exact", w2.metric("wasserstein", "quantile_vs_exact"), 1e-12);
    v.at_most("asymmetry", w2.metric("wasserstein", "asymmetry"), 1e-12);
    v.at_most("self_distance", w2.metric("wasserstein", "self_distance"), 1e-12);
    v.at_least("triangle_margin", w2.metric("wasserstein", "triangle_margin"), -1e-12);
    verdicts.push((9, "Wasserstein oracles", v));

    let hj = run("hjbfp_noisy_lq", out);
    let mut v = Verdict::new();
    exit_is(&mut v, &hj, EXIT_OK);
    v.at_most("grid_vs_riccati_sup", hj.metric("hjbfp_compare", "grid_riccati_sup"), 1e-3);
    v.at_most("value_gap", hj.metric("hjbfp_compare", "value_gap"), 2e-2);
    v.at_most("gradient_gap", hj.metric("hjbfp_compare", "gradient_gap"), 5e-3);
    v.at_most("mass_drift", hj.metric("hjbfp_compare", "mass_drift"), 1e-12);
    v.at_most("runtime_s", secs(hj.elapsed), 60.0);
    verdicts.push((10, "HJB-FP cross-validation", v));

    let mut v = Verdict::new();
    let rej = run("stress_rejected", out);
    exit_is(&mut v, &rej, EXIT_SOLVER_FAILED);
    let kind = rej.failure_kind();
    v.require("rejected as admission-rejected/not-contractive", matches!(kind.as_deref(), Some("admission-rejected" | "not-contractive")));
    let short = run("stress_short", out);
    exit_is(&mut v, &short, EXIT_OK);
    v.require("short lambda_T>0", short.report().ok().and_then(|r| r.lambda_t).is_some_and(|l| l > 0.0));
    v.at_most("short final_gap", short.report().map(|r| r.solver.final_gap), 1e-8);
    let long = run("stress_long", out);
    exit_is(&mut v, &long, EXIT_SOLVER_FAILED);
    v.require("long lambda_T<0", long.report().ok().and_then(|r| r.lambda_t).is_some_and(|l| l < 0.0));
    v.require("long divergence detected", long.failure_kind().as_deref() == Some("not-contractive"));
    v.require("long reports no value", long.report().map(|r| r.value.is_none()).unwrap_or(false));
    verdicts.push((11, "Robustness gates", v));

    let other = tempfile::tempdir().expect("temp dir");
    let again = run("noisy_lq_dpp", other.path());
    let mut v = Verdict::new();
    match (dpp.report(), again.report()) {
        (Ok(a), Ok(b)) => {
            let rows = diff(a, b, 0.0);
            v.require(&format!("{} differing fields", rows.len()), rows.is_empty());
            let strip = |t: &str| {
                let mut j: serde_json::Value = serde_json::from_str(t).unwrap_or_default();
                j.as_object_mut().map(|o| o.remove("meta"));
                serde_json::to_string(&j).unwrap_or_default()
            };
            v.require("report bytes outside meta identical", !dpp.text.is_empty() && strip(&dpp.text) == strip(&again.text));
            let side = |d: &Path| std::fs::read(d.join("noisy_lq_dpp.residuals.csv")).ok();
            v.require("residual tables identical", side(out).is_some() && side(out) == side(other.path()));
        }
        _ => v.fail("missing report"),
    }
    verdicts.push((12, "Determinism", v));

    let mut failed = 0;
    for (n, title, v) in &verdicts {
        if !v.ok {
            failed += 1;
        }
        println!("{} criterion {n:>2}: {title} [{}]", if v.ok { "PASS" } else { "FAIL" }, v.terms.join(", "));
    }
    println!("acceptance: {} passed, {failed} failed in {:.1}s", verdicts.len() - failed, start.elapsed().as_secs_f64());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
