use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mfc_lab::riccati::LqRiccati;
use mfc_lab_cli::report::{diff, RunReport};
use mfc_lab_cli::{run_config, suite, RunOptions, EXIT_CHECK_FAILED, EXIT_CONFIG_INVALID, EXIT_OK};

#[derive(Parser)]
#[command(name = "mfc-lab", version, about = "Mean field type control experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one config and write its report.
    Run {
        config: PathBuf,
        /// Replace discretization.seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run every config listed in a manifest.
    Suite { manifest: PathBuf },
    /// Print closed-form reference solutions.
    Oracle {
        #[command(subcommand)]
        which: Oracle,
    },
    /// Work with run reports.
    Report {
        #[command(subcommand)]
        action: ReportAction,
    },
}

#[derive(Subcommand)]
enum Oracle {
    /// LQ benchmark F = 0, F_T = ½w‖x‖², σ = s₀I.
    Riccati {
        #[arg(long, default_value_t = 1.0)]
        lambda: f64,
        #[arg(long, default_value_t = 1.0)]
        weight: f64,
        #[arg(long, default_value_t = 0.0)]
        sigma: f64,
        #[arg(long, default_value_t = 1)]
        dim: usize,
        #[arg(long = "T", alias = "t-end", default_value_t = 1.0)]
        t_end: f64,
        #[arg(long, default_value_t = 0.0)]
        t: f64,
        /// ‖X‖² for the value.
        #[arg(long, default_value_t = 1.0)]
        x_norm2: f64,
    },
}

#[derive(Subcommand)]
enum ReportAction {
    /// Compare the numeric sections of two reports; exit 1 when they differ.
    Diff {
        a: PathBuf,
        b: PathBuf,
        #[arg(long, default_value_t = 0.0)]
        rel_tol: f64,
    },
}

fn code(c: i32) -> ExitCode {
    ExitCode::from(c.clamp(0, 255) as u8)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run { config, seed } => {
            let r = run_config(&config, &RunOptions { seed, ..Default::default() });
            if let Some(p) = &r.report_path {
                println!("{}", p.display());
            }
            if let Some(m) = &r.message {
                eprintln!("error: {m}");
            }
            if let Some(rep) = &r.report {
                for c in rep.checks.iter().filter(|c| !c.passed) {
                    eprintln!("check failed: {}", c.name);
                }
            }
            code(r.exit_code)
        }
        Command::Suite { manifest } => {
            let (exit, summary, message) = suite::run_suite(&manifest);
            if let Some(s) = &summary {
                print!("{}", s.to_csv());
            }
            if let Some(m) = message {
                eprintln!("error: {m}");
            }
            code(exit)
        }
        Command::Oracle { which: Oracle::Riccati { lambda, weight, sigma, dim, t_end, t, x_norm2 } } => {
            if !(lambda > 0.0 && t_end > t && dim > 0 && lambda + weight * (t_end - t) > 0.0) {
                eprintln!("error: need lambda > 0, T > t, dim > 0 and lambda + weight·(T − t) > 0");
                return code(EXIT_CONFIG_INVALID);
            }
            let r = LqRiccati { lambda, terminal_weight: weight, sigma, dim, t_end };
            let out = serde_json::json!({
                "lambda": lambda, "weight": weight, "sigma": sigma, "dim": dim, "t": t, "T": t_end, "x_norm2": x_norm2,
                "p": r.p(t),
                "p_integral": r.p_integral(t),
                "value": r.value(t, x_norm2),
            });
            println!("{}", serde_json::to_string_pretty(&out).expect("json"));
            code(EXIT_OK)
        }
        Command::Report { action: ReportAction::Diff { a, b, rel_tol } } => {
            let read = |p: &PathBuf| std::fs::read_to_string(p).map_err(|e| e.to_string()).and_then(|t| RunReport::from_json(&t));
            let (ra, rb) = match (read(&a), read(&b)) {
                (Ok(x), Ok(y)) => (x, y),
                (Err(e), _) | (_, Err(e)) => {
                    eprintln!("error: {e}");
                    return code(EXIT_CONFIG_INVALID);
                }
            };
            let rows = diff(&ra, &rb, rel_tol);
            for (path, x, y) in &rows {
                println!("{path}\t{x}\t{y}");
            }
            code(if rows.is_empty() { EXIT_OK } else { EXIT_CHECK_FAILED })
        }
    }
}
