//! crisk: analytic credit portfolio risk measures with a Monte Carlo
//! reference engine, behind four subcommands.
//!
//! analyze   analytic VaR/ES report with per-order breakdown
//! simulate  Monte Carlo reference run
//! compare   analytic-vs-simulated difference tables
//! generate  seeded benchmark portfolios
//!
//! Configuration layers as defaults < config file < flags; the effective
//! configuration is echoed in every output's manifest. Exit codes: 0
//! success, 2 input/validation, 3 numerical, 4 I/O.

mod config;
mod manifest;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use crisk_core::{CriskError, Result};

use config::{
    build_risk_config, build_sim_config, load_file_config, AnalyzeOverrides, SimulateOverrides,
};
use run::{cmd_analyze, cmd_compare, cmd_generate, cmd_simulate, GenerateParams};

#[derive(Parser)]
#[command(
    name = "crisk",
    version,
    about = "Credit portfolio tail risk: Hermite-expansion analytics and Monte Carlo reference"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Analytic report: sigma, VaR, ES, per-order breakdown, contributions.
    Analyze(AnalyzeArgs),
    /// Monte Carlo reference estimates for the same measures.
    Simulate(SimulateArgs),
    /// Difference tables between an analyze run and a simulate run.
    Compare(CompareArgs),
    /// Seeded benchmark portfolio files.
    Generate(GenerateArgs),
}

#[derive(Args)]
struct InputFiles {
    /// Portfolio CSV.
    #[arg(long)]
    portfolio: PathBuf,
    /// Factor list file.
    #[arg(long)]
    factors: PathBuf,
    /// Optional TOML config; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for the report files.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Omit wall-clock timings so reruns are byte-identical.
    #[arg(long)]
    deterministic: bool,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[command(flatten)]
    io: InputFiles,
    /// Tail probability on the value distribution, in (0, 0.5).
    #[arg(long, conflicts_with = "confidence")]
    alpha: Option<f64>,
    /// VaR confidence level, e.g. 0.999 or 99.9.
    #[arg(long)]
    confidence: Option<f64>,
    /// Comma list from 1f,mf2,mf3,ga2,ga3.
    #[arg(long)]
    orders: Option<String>,
    #[arg(long)]
    tensor_order: Option<usize>,
    #[arg(long)]
    onef_order: Option<usize>,
    #[arg(long)]
    cond_cap: Option<usize>,
    #[arg(long)]
    k_cap: Option<usize>,
    #[arg(long)]
    series_order: Option<usize>,
    #[arg(long)]
    z_nodes: Option<usize>,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    io: InputFiles,
    #[arg(long, conflicts_with = "confidence")]
    alpha: Option<f64>,
    #[arg(long)]
    confidence: Option<f64>,
    #[arg(long)]
    scenarios: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    /// systematic or full.
    #[arg(long)]
    mode: Option<String>,
    /// Contribution window as lo:hi tail probabilities.
    #[arg(long)]
    window: Option<String>,
    #[arg(long)]
    batch: Option<u64>,
}

#[derive(Args)]
struct CompareArgs {
    /// analysis.json from an analyze run.
    #[arg(long)]
    analysis: PathBuf,
    /// simulation.json from a simulate run.
    #[arg(long)]
    simulation: PathBuf,
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args)]
struct GenerateArgs {
    /// diversified, concentrated or heterogeneous.
    #[arg(long)]
    kind: String,
    #[arg(long, default_value_t = 5)]
    regions: usize,
    #[arg(long, default_value_t = 5)]
    industries: usize,
    /// Ignored for diversified, which is always regions x industries.
    #[arg(long, default_value_t = 100)]
    loans: usize,
    /// Loans pinned to the first factor pair (concentrated only).
    #[arg(long, default_value_t = 20)]
    block: usize,
    /// Count of dominant exposures (heterogeneous only).
    #[arg(long, default_value_t = 10)]
    dominant: usize,
    #[arg(long, default_value_t = 0.6)]
    rho: f64,
    #[arg(long, default_value_t = 0.01)]
    pd: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Fraction of loading variance on the region factor.
    #[arg(long, default_value_t = 0.5)]
    region_share: f64,
    /// Variance share of the macro component blended into every loading.
    #[arg(long, default_value_t = 0.6)]
    common_share: f64,
    /// Portfolio CSV to write.
    #[arg(long)]
    portfolio: PathBuf,
    /// Factor list file to write.
    #[arg(long)]
    factors: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Analyze(args) => {
            let file = load_file_config(args.io.config.as_deref())?;
            let overrides = AnalyzeOverrides {
                alpha: args.alpha,
                confidence: args.confidence,
                orders: args.orders,
                tensor_order: args.tensor_order,
                onef_order: args.onef_order,
                cond_cap: args.cond_cap,
                k_cap: args.k_cap,
                series_order: args.series_order,
                z_nodes: args.z_nodes,
            };
            let cfg = build_risk_config(&file.analyze, &overrides)?;
            let out = cmd_analyze(
                &args.io.portfolio,
                &args.io.factors,
                &cfg,
                &args.io.out,
                args.io.deterministic,
            )?;
            let r = &out.report;
            println!(
                "alpha {}  E[V] {:.6}  sigma {:.6}  VaR {:.6}  ES {:.6}",
                r.alpha, r.expected_value, r.sigma, r.var_total, r.es_total
            );
            println!(
                "VaR parts: 1f {:.6}  mf2 {:+.6}  mf3 {:+.6}  ga2 {:+.6}  ga3 {:+.6}",
                r.var_parts.onef, r.var_parts.mf2, r.var_parts.mf3, r.var_parts.ga2, r.var_parts.ga3
            );
            println!("wrote {}", out.report_path.display());
            println!("wrote {}", out.csv_path.display());
        }
        Command::Simulate(args) => {
            let file = load_file_config(args.io.config.as_deref())?;
            let overrides = SimulateOverrides {
                alpha: args.alpha,
                confidence: args.confidence,
                scenarios: args.scenarios,
                seed: args.seed,
                mode: args.mode,
                window: args.window,
                batch: args.batch,
            };
            let cfg = build_sim_config(&file.simulate, &overrides)?;
            let out = cmd_simulate(
                &args.io.portfolio,
                &args.io.factors,
                &cfg,
                &args.io.out,
                args.io.deterministic,
            )?;
            let r = &out.result;
            println!(
                "{:?} x{}  E[V] {:.6}  VaR {:.6} (se {:.2e})  ES {:.6} (se {:.2e})",
                r.mode, r.scenarios, r.expected_value, r.var_estimate, r.var_std_error,
                r.es_estimate, r.es_std_error
            );
            println!("wrote {}", out.result_path.display());
            println!("wrote {}", out.csv_path.display());
        }
        Command::Compare(args) => {
            let out = cmd_compare(&args.analysis, &args.simulation, &args.out)?;
            let a = &out.artifact;
            let pct = |r: Option<f64>| {
                r.map(|x| format!("{:+.2}%", 100.0 * x))
                    .unwrap_or_else(|| "n/a".into())
            };
            println!(
                "VaR {} vs {}  rel {}  {}",
                a.var.analytic,
                a.var.simulated,
                pct(a.var.rel_diff),
                if a.var.within_3se { "within 3se" } else { "OUTSIDE 3se" }
            );
            println!(
                "ES  {} vs {}  rel {}  {}",
                a.es.analytic,
                a.es.simulated,
                pct(a.es.rel_diff),
                if a.es.within_3se { "within 3se" } else { "OUTSIDE 3se" }
            );
            println!(
                "contributions: {} facilities, {} outside 3se, rel diff p50 {}",
                a.summary.facilities,
                a.summary.outside_3se,
                pct(a.summary.rel_diff_p50)
            );
            println!("wrote {}", out.json_path.display());
            println!("wrote {}", out.csv_path.display());
        }
        Command::Generate(args) => {
            let params = GenerateParams {
                kind: args.kind,
                regions: args.regions,
                industries: args.industries,
                loans: args.loans,
                block: args.block,
                dominant: args.dominant,
                rho: args.rho,
                pd: args.pd,
                seed: args.seed,
                region_share: args.region_share,
                common_share: args.common_share,
            };
            let portfolio = cmd_generate(&params, &args.portfolio, &args.factors)?;
            println!(
                "generated {} facilities on {} factors",
                portfolio.facilities.len(),
                portfolio.n_factors()
            );
            println!("wrote {}", args.portfolio.display());
            println!("wrote {}", args.factors.display());
        }
    }
    Ok(())
}

// Trip an early build failure if the error-to-exit-code mapping drifts from
// the documented contract.
const _: fn(&CriskError) -> i32 = CriskError::exit_code;
