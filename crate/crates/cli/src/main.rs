//! Batch front end: parses a run configuration, orchestrates single
//! optimizations, method comparisons and full sweeps, and writes
//! machine-readable results plus plot-ready surface data.

mod config;
mod output;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use config::{build_design, resolve_i3, PowerMethod, RunConfig};
use serde_json::json;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};
use trialdesign_core::model::AlphaVector;
use trialdesign_core::optimizer::{optimize_alpha, Seeds};
use trialdesign_core::power::{power_fine_grid, power_grid_sum, power_monte_carlo};
use trialdesign_core::sweep::{compare_methods, sweep, RGrid, SweepSpec};

const WORKERS_ENV: &str = "TRIALDESIGN_WORKERS";

#[derive(Parser)]
#[command(
    name = "trialdesign-opt",
    about = "Optimal significance-level allocation and subpopulation sizing for nested trial designs",
    version
)]
struct Cli {
    #[command(subcommand)]
    mode: Mode,
}

#[derive(Args)]
struct Common {
    /// Path to the JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the configured RNG seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the worker count (also settable via TRIALDESIGN_WORKERS).
    #[arg(long)]
    workers: Option<usize>,
    /// Output directory (created if missing); defaults to the current one.
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Mode {
    /// Expected power of a fixed design at fixed significance levels.
    Power(Common),
    /// Optimal significance levels for a fixed design.
    Optimize(Common),
    /// Novel-vs-standard method comparison.
    Compare(Common),
    /// Sweep over the subpopulation-size lattice.
    Sweep(Common),
}

/// Errors split by exit code: 1 for configuration/validation problems,
/// 2 for numerical failures.
enum CliError {
    Validation(anyhow::Error),
    Numerical(anyhow::Error),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Numerical(_) => 2,
        }
    }

    fn error(&self) -> &anyhow::Error {
        match self {
            CliError::Validation(e) | CliError::Numerical(e) => e,
        }
    }
}

fn validation<E: Into<anyhow::Error>>(stage: &'static str) -> impl FnOnce(E) -> CliError {
    move |e| CliError::Validation(e.into().context(format!("stage: {stage}")))
}

fn numerical<E: Into<anyhow::Error>>(stage: &'static str) -> impl FnOnce(E) -> CliError {
    move |e| CliError::Numerical(e.into().context(format!("stage: {stage}")))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (expected_mode, common) = match &cli.mode {
        Mode::Power(c) => ("power", c),
        Mode::Optimize(c) => ("optimize", c),
        Mode::Compare(c) => ("compare", c),
        Mode::Sweep(c) => ("sweep", c),
    };
    match run(expected_mode, common) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {:#}", e.error());
            ExitCode::from(e.code())
        }
    }
}

fn run(expected_mode: &str, common: &Common) -> Result<(), CliError> {
    let started = Instant::now();
    let raw = std::fs::read_to_string(&common.config)
        .map_err(validation("read-config"))?;
    let mut cfg: RunConfig =
        serde_json::from_str(&raw).map_err(validation("parse-config"))?;
    cfg.validate().map_err(validation("validate-config"))?;
    if cfg.mode_name() != expected_mode {
        return Err(CliError::Validation(anyhow::anyhow!(
            "config mode '{}' does not match subcommand '{expected_mode}'",
            cfg.mode_name()
        )));
    }
    if let Some(seed) = common.seed {
        cfg.engine_mut().seed = seed;
    }
    let workers = common
        .workers
        .or_else(|| {
            std::env::var(WORKERS_ENV)
                .ok()
                .and_then(|v| v.parse().ok())
        })
        .unwrap_or(cfg.engine().workers);
    if workers > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build_global()
            .map_err(validation("thread-pool"))?;
    }
    std::fs::create_dir_all(&common.out).map_err(validation("create-out-dir"))?;

    let mut summary = json!({
        "schema_version": config::SCHEMA_VERSION,
        "mode": cfg.mode_name(),
        "seed": cfg.engine().seed,
        "workers": workers,
    });

    let line = match &cfg {
        RunConfig::Power {
            design,
            sizing,
            scenario,
            alpha,
            engine,
            method,
            ..
        } => {
            let scen = scenario.build().map_err(CliError::Validation)?;
            let i3 = resolve_i3(design.i3, sizing, &scen).map_err(CliError::Validation)?;
            let d = build_design(design, i3).map_err(CliError::Validation)?;
            let prior = trialdesign_core::model::build_prior(&d, &scen)
                .map_err(numerical("build-prior"))?;
            let a = AlphaVector::new(alpha.clone(), d.alpha0())
                .map_err(validation("alpha-levels"))?;
            let est = match method {
                PowerMethod::MonteCarlo => {
                    let mc = engine.mc().map_err(CliError::Validation)?;
                    power_monte_carlo(&d, &prior, &a, mc).map_err(numerical("power-monte-carlo"))?
                }
                PowerMethod::Grid => {
                    let g = engine.baseline_grid().map_err(CliError::Validation)?;
                    power_grid_sum(&d, &prior, &a, &g).map_err(numerical("power-grid-sum"))?
                }
                PowerMethod::FineGrid => {
                    power_fine_grid(&d, &prior, &a).map_err(numerical("power-fine-grid"))?
                }
            };
            summary["power"] = json!(est.value);
            summary["method"] = json!(est.method.to_string());
            summary["variance_bound"] = json!(est.variance_bound);
            summary["i3"] = json!(i3);
            format!("power={:.6} method={}", est.value, est.method)
        }

        RunConfig::Optimize {
            design,
            sizing,
            scenario,
            engine,
            ..
        } => {
            let scen = scenario.build().map_err(CliError::Validation)?;
            let i3 = resolve_i3(design.i3, sizing, &scen).map_err(CliError::Validation)?;
            let d = build_design(design, i3).map_err(CliError::Validation)?;
            let prior = trialdesign_core::model::build_prior(&d, &scen)
                .map_err(numerical("build-prior"))?;
            let mc = engine.mc().map_err(CliError::Validation)?;
            let res = optimize_alpha(
                &d,
                &prior,
                engine.n3,
                engine.grid_m,
                mc,
                Seeds::from_master(engine.seed),
            )
            .map_err(numerical("optimize-alpha"))?;
            let n = d.n();
            let row = trialdesign_core::sweep::SweepRow {
                r: d.fractions()[1..].to_vec(),
                alpha: res.alpha.clone(),
                power: res.power.value,
                method: res.power.method,
                seconds: started.elapsed().as_secs_f64(),
            };
            output::write_rows_csv(&common.out.join("results.csv"), n, &[row])
                .map_err(numerical("write-results"))?;
            if let Some(surface) = &res.surface {
                let names: Vec<String> = (1..n).map(|i| format!("alpha{i}")).collect();
                let name_refs: Vec<&str> = names.iter().map(|s| s.as_str()).collect();
                output::emit_surface(
                    surface,
                    50,
                    &name_refs,
                    &common.out.join("alpha_surface.csv"),
                )
                .map_err(numerical("emit-surface"))?;
            }
            summary["alpha"] = json!(res.alpha.alphas());
            summary["power"] = json!(res.power.value);
            summary["i3"] = json!(i3);
            summary["deviation_flagged"] = json!(res.deviation_flagged);
            format!(
                "alpha={:?} power={:.6}",
                res.alpha.alphas(),
                res.power.value
            )
        }

        RunConfig::Compare {
            alpha0,
            sizing,
            scenario,
            r_settings,
            i3,
            engine,
            ..
        } => {
            let scen = scenario.build().map_err(CliError::Validation)?;
            let i3 = resolve_i3(*i3, sizing, &scen).map_err(CliError::Validation)?;
            let mut problems = Vec::new();
            for r in r_settings {
                let d = trialdesign_core::model::NestedDesign::new(r.clone(), i3, *alpha0)
                    .map_err(validation("r-settings"))?;
                let prior = trialdesign_core::model::build_prior(&d, &scen)
                    .map_err(numerical("build-prior"))?;
                problems.push((d, prior));
            }
            if problems.is_empty() {
                return Err(CliError::Validation(anyhow::anyhow!(
                    "r_settings must be non-empty"
                )));
            }
            let n = problems[0].0.n();
            let mc = engine.mc().map_err(CliError::Validation)?;
            let grid = engine.baseline_grid().map_err(CliError::Validation)?;
            let stats = compare_methods(&problems, mc, &grid, engine.n3, engine.grid_m, engine.seed)
                .map_err(numerical("compare-methods"))?;
            output::write_compare_csv(&common.out.join("compare.csv"), n, &stats)
                .map_err(numerical("write-compare"))?;
            let q_nonneg = stats.iter().filter(|s| s.q >= 0.0).count();
            summary["problems"] = json!(stats.len());
            summary["q_nonnegative"] = json!(q_nonneg);
            summary["i3"] = json!(i3);
            format!("problems={} q>=0 for {}", stats.len(), q_nonneg)
        }

        RunConfig::Sweep {
            alpha0,
            n,
            rgrid_step,
            sizing,
            scenario,
            i3,
            engine,
            surface_density,
            ..
        } => {
            let scen = scenario.build().map_err(CliError::Validation)?;
            let rgrid = RGrid::new(*n, *rgrid_step).map_err(validation("r-grid"))?;
            let mc = engine.mc().map_err(CliError::Validation)?;
            let spec = SweepSpec {
                alpha0: *alpha0,
                sizing_alpha: sizing.alpha,
                sizing_beta: sizing.beta,
                i3: *i3,
                n3: engine.n3,
                grid_m: engine.grid_m,
                mc,
                master_seed: engine.seed,
            };
            let res = sweep(&spec, &scen, &rgrid).map_err(numerical("sweep"))?;
            output::write_rows_csv(&common.out.join("results.csv"), *n, &res.rows)
                .map_err(numerical("write-results"))?;
            let names: Vec<String> = (2..=*n).map(|i| format!("r{i}")).collect();
            let name_refs: Vec<&str> = names.iter().map(|s| s.as_str()).collect();
            output::emit_surface(
                &res.surface,
                *surface_density,
                &name_refs,
                &common.out.join("power_surface.csv"),
            )
            .map_err(numerical("emit-surface"))?;
            // Dropped populations are reported with fraction and level 0.
            let mut r_report = res.r_opt.clone();
            for (i, flag) in res.boundary_low.iter().enumerate() {
                if *flag && i >= res.r_opt.len() - res.dropped {
                    r_report[i] = 0.0;
                }
            }
            output::write_optimum_csv(
                &common.out.join("optimum.csv"),
                *n,
                &r_report,
                res.alpha_at_r_opt.alphas(),
                res.power_at_r_opt,
                "monte-carlo",
                started.elapsed().as_secs_f64(),
            )
            .map_err(numerical("write-optimum"))?;
            summary["r_opt"] = json!(r_report);
            summary["alpha_at_r_opt"] = json!(res.alpha_at_r_opt.alphas());
            summary["power_at_r_opt"] = json!(res.power_at_r_opt);
            summary["rows"] = json!(res.rows.len());
            summary["dropped_populations"] = json!(res.dropped);
            format!(
                "r_opt={:?} power={:.6} rows={}",
                r_report,
                res.power_at_r_opt,
                res.rows.len()
            )
        }
    };

    let wall = started.elapsed().as_secs_f64();
    summary["wall_seconds"] = json!(wall);
    summary["timestamp_unix"] = json!(SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0));
    write_summary(&common.out.join("summary.json"), &summary)
        .map_err(numerical("write-summary"))?;

    println!(
        "mode={} {} wall={:.2}s",
        expected_mode, line, wall
    );
    Ok(())
}

fn write_summary(path: &Path, summary: &serde_json::Value) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(summary).context("serialize summary")?;
    std::fs::write(path, text + "\n").with_context(|| format!("write {}", path.display()))?;
    Ok(())
}
