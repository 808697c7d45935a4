use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use zo_core::analysis::{fig2_collapse, format_table3, Fig2Config, Fig2Run};
use zo_core::harness::sweep::{robust_log_width, robustness_csv};
use zo_core::harness::{
    coarse_fine_sweep, robustness_curve, run, transfer_step_size, verify_bounds, verify_moments, BoundsConfig,
    ExperimentConfig, MomentsConfig,
};
use zo_core::ZoError;

const EXIT_CHECK_FAILED: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_NUMERIC: u8 = 3;
const EXIT_ALL_DIVERGED: u8 = 4;

/// Zeroth-order optimizer experiments.
#[derive(Parser)]
#[command(name = "zo-bench", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Io {
    /// TOML config file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory; experiment configs may name one instead.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Run every seed of an experiment and write its traces.
    Run(Io),
    /// Coarse-then-fine step-size sweep.
    Sweep(Io),
    /// Sweep, then tabulate loss against normalized step size.
    Robustness(Io),
    /// Monte Carlo check of the squared-moment formulas.
    VerifyMoments(Io),
    /// Compare observed gradient norms with the convergence bounds.
    VerifyBounds(Io),
    /// Second-moment collapse study.
    Fig2(Io),
}

enum Failure {
    Zo(ZoError),
    Check(String),
    Diverged(String),
}

impl From<ZoError> for Failure {
    fn from(e: ZoError) -> Self {
        Failure::Zo(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Zo(ZoError::Io(e))
    }
}

type CliResult = Result<(), Failure>;

fn exit_code(e: &ZoError) -> u8 {
    match e {
        ZoError::Config(_) | ZoError::InvalidArgument(_) | ZoError::Precondition(_) => EXIT_CONFIG,
        ZoError::NumericFailure { .. } | ZoError::DegenerateScale => EXIT_NUMERIC,
        ZoError::AllDiverged => EXIT_ALL_DIVERGED,
        ZoError::Io(_) => EXIT_CHECK_FAILED,
    }
}

fn output_dir(io: &Io, fallback: Option<&Path>) -> Result<PathBuf, Failure> {
    let dir = io
        .out
        .clone()
        .or_else(|| fallback.map(Path::to_path_buf))
        .ok_or_else(|| ZoError::Config("no output directory: pass --out or set `output`".into()))?;
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult {
    let text = serde_json::to_string_pretty(value).map_err(|e| ZoError::InvalidArgument(e.to_string()))?;
    std::fs::write(path, text)?;
    Ok(())
}

#[derive(Serialize)]
struct Transfer {
    eta_fzoo: f64,
    mean_sigma: f64,
    eta_zo_sgd: f64,
}

fn cmd_run(io: &Io) -> CliResult {
    let cfg = ExperimentConfig::load(&io.config)?;
    let dir = output_dir(io, cfg.output.as_deref())?;
    std::fs::write(dir.join("config.toml"), cfg.to_toml_string())?;
    let traces = run(&cfg)?;
    let mut sigmas = Vec::new();
    for t in &traces {
        t.write(&dir)?;
        if !t.sigmas.is_empty() {
            let mut csv = String::from("step,sigma\n");
            for (i, s) in t.sigmas.iter().enumerate() {
                let _ = writeln!(csv, "{},{s}", i + 1);
            }
            std::fs::write(dir.join(format!("sigmas_seed{}.csv", t.summary.seed)), csv)?;
            sigmas.extend_from_slice(&t.sigmas);
        }
    }
    if !sigmas.is_empty() {
        let eta = cfg.optimizer.eta;
        let eta_zo_sgd = transfer_step_size(eta, &sigmas)?;
        write_json(&dir.join("transfer.json"), &Transfer { eta_fzoo: eta, mean_sigma: eta / eta_zo_sgd, eta_zo_sgd })?;
    }
    let diverged: Vec<u64> = traces.iter().filter(|t| t.diverged()).map(|t| t.summary.seed).collect();
    for t in &traces {
        let s = &t.summary;
        println!("seed {}: final {:.6e}, best {:.6e}, steps {}", s.seed, s.final_loss, s.best_loss, s.steps_run);
    }
    if diverged.is_empty() {
        Ok(())
    } else {
        Err(Failure::Diverged(format!("seeds {diverged:?} diverged")))
    }
}

fn sweep_common(io: &Io) -> Result<(ExperimentConfig, PathBuf, zo_core::harness::SweepResult), Failure> {
    let cfg = ExperimentConfig::load(&io.config)?;
    let dir = output_dir(io, cfg.output.as_deref())?;
    let result = coarse_fine_sweep(&cfg)?;
    std::fs::write(dir.join("sweep.csv"), result.to_csv())?;
    write_json(&dir.join("sweep.json"), &result)?;
    println!("best eta {} (coarse {}, bracket {:?})", result.best_eta, result.coarse_best, result.bracket);
    Ok((cfg, dir, result))
}

fn cmd_sweep(io: &Io) -> CliResult {
    sweep_common(io).map(|_| ())
}

#[derive(Serialize)]
struct RobustnessSummary {
    best_eta: f64,
    log_width: f64,
}

fn cmd_robustness(io: &Io) -> CliResult {
    let (_, dir, result) = sweep_common(io)?;
    let rows = robustness_curve(&result);
    std::fs::write(dir.join("robustness.csv"), robustness_csv(&rows))?;
    let log_width = robust_log_width(&rows, 10.0);
    write_json(&dir.join("robustness.json"), &RobustnessSummary { best_eta: result.best_eta, log_width })?;
    println!("log-width of the 10x band: {log_width:.3}");
    Ok(())
}

fn cmd_verify_moments(io: &Io) -> CliResult {
    let cfg = MomentsConfig::load(&io.config)?;
    let dir = output_dir(io, None)?;
    let out = verify_moments(&cfg)?;
    for (i, o) in out.iter().enumerate() {
        std::fs::write(dir.join(format!("moments_case{i}.csv")), o.report.to_csv())?;
        println!(
            "case {i}: {} d={} q={} max_z {:.2} max_rel_err {:.4} {}",
            o.case.distribution,
            o.case.d,
            o.case.q,
            o.report.max_z,
            o.report.max_rel_err,
            if o.pass { "ok" } else { "FAIL" }
        );
    }
    write_json(&dir.join("moments.json"), &out)?;
    if out.iter().all(|o| o.pass) {
        Ok(())
    } else {
        Err(Failure::Check("moment check outside tolerance".into()))
    }
}

fn cmd_verify_bounds(io: &Io) -> CliResult {
    let cfg = BoundsConfig::load(&io.config)?;
    let dir = output_dir(io, None)?;
    let report = verify_bounds(&cfg)?;
    write_json(&dir.join("bounds.json"), &report)?;
    for c in [&report.meazo, &report.zosgd] {
        println!("{}: observed {:.6e} <= bound {:.6e}: {}", c.optimizer, c.empirical, c.bound, c.holds);
    }
    println!("classical limit relative difference {:.3e}", report.classical_limit.rel_diff);
    if report.holds() {
        Ok(())
    } else {
        Err(Failure::Check("observed gradient norm exceeds a bound".into()))
    }
}

fn fig2_summary_csv(runs: &[Fig2Run]) -> String {
    let mut out = String::from("method,d,steps,reached,final_loss,spread,collapse_target,max_rel_dev\n");
    for r in runs {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.method.as_str(),
            r.d,
            r.steps,
            r.reached,
            r.final_loss,
            r.spread,
            r.collapse_target,
            r.max_rel_dev
        );
    }
    out
}

fn fig2_series_csv(runs: &[Fig2Run]) -> String {
    let mut out = String::from("method,d,step,loss,grad_norm_sq,spread,v_mean\n");
    for r in runs {
        for p in &r.series {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.method.as_str(),
                r.d,
                p.step,
                p.loss,
                p.grad_norm_sq,
                p.spread,
                p.v_mean
            );
        }
    }
    out
}

fn cmd_fig2(io: &Io) -> CliResult {
    let cfg = Fig2Config::load(&io.config)?;
    let dir = output_dir(io, None)?;
    let runs = fig2_collapse(&cfg)?;
    std::fs::write(dir.join("fig2_summary.csv"), fig2_summary_csv(&runs))?;
    std::fs::write(dir.join("fig2_series.csv"), fig2_series_csv(&runs))?;
    let labels: Vec<String> = runs.iter().map(|r| format!("{} d={}", r.method.as_str(), r.d)).collect();
    let columns: Vec<(&str, _)> = labels.iter().map(String::as_str).zip(runs.iter().map(|r| r.stats)).collect();
    std::fs::write(dir.join("table3.txt"), format_table3(&columns))?;
    print!("{}", fig2_summary_csv(&runs));
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(io) => cmd_run(io),
        Command::Sweep(io) => cmd_sweep(io),
        Command::Robustness(io) => cmd_robustness(io),
        Command::VerifyMoments(io) => cmd_verify_moments(io),
        Command::VerifyBounds(io) => cmd_verify_bounds(io),
        Command::Fig2(io) => cmd_fig2(io),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Zo(e)) => {
            eprintln!("zo-bench: {e}");
            ExitCode::from(exit_code(&e))
        }
        Err(Failure::Check(msg)) => {
            eprintln!("zo-bench: {msg}");
            ExitCode::from(EXIT_CHECK_FAILED)
        }
        Err(Failure::Diverged(msg)) => {
            eprintln!("zo-bench: {msg}");
            ExitCode::from(EXIT_NUMERIC)
        }
    }
}
