//! The four workflows behind the subcommands, file handling included.

use std::fs;
use std::path::{Path, PathBuf};

use crisk_core::mc::simulate;
use crisk_core::portfolio::{load_portfolio, save_portfolio};
use crisk_core::synth::{synthesize_benchmark, BenchmarkKind, BenchmarkSpec};
use crisk_core::{
    analyze_full, CriskError, Portfolio, Result, RiskConfig, RiskReport, SimConfig, SimResult,
};
use serde::{Deserialize, Serialize};

use crate::manifest::{digest_file, InputDigest, RunManifest, Timings};

/// Analytic report artifact: manifest, report, and the principal-factor
/// geometry that downstream plots sort by.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnalysisArtifact {
    pub manifest: RunManifest,
    pub report: RiskReport,
    /// Principal direction in the original factor basis; absent for flat
    /// portfolios.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub principal_factor: Option<Vec<f64>>,
    /// Per-facility loading projection on the principal direction, in
    /// portfolio order.
    pub facility_projections: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimulationArtifact {
    pub manifest: RunManifest,
    pub result: SimResult,
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|source| CriskError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| CriskError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn to_pretty_json<T: Serialize>(value: &T) -> String {
    let mut text = serde_json::to_string_pretty(value).expect("artifact serializes");
    text.push('\n');
    text
}

fn from_json<T: for<'de> Deserialize<'de>>(path: &Path, text: &str) -> Result<T> {
    serde_json::from_str(text).map_err(|e| CriskError::Format {
        path: path.display().to_string(),
        detail: e.to_string(),
    })
}

fn load_inputs(portfolio: &Path, factors: &Path) -> Result<(Portfolio, Vec<InputDigest>)> {
    let digests = vec![
        digest_file("portfolio", portfolio)?,
        digest_file("factors", factors)?,
    ];
    let p = load_portfolio(portfolio, factors)?;
    Ok((p, digests))
}

pub struct AnalyzeOutcome {
    pub report_path: PathBuf,
    pub csv_path: PathBuf,
    pub report: RiskReport,
}

pub fn cmd_analyze(
    portfolio_path: &Path,
    factors_path: &Path,
    cfg: &RiskConfig,
    out_dir: &Path,
    deterministic: bool,
) -> Result<AnalyzeOutcome> {
    let mut timings = Timings::new(!deterministic);
    timings.stage("load");
    let (portfolio, inputs) = load_inputs(portfolio_path, factors_path)?;

    timings.stage("analyze");
    let analysis = analyze_full(&portfolio, cfg)?;

    timings.stage("write");
    let dim = portfolio.n_factors();
    let principal = analysis
        .rotation
        .as_ref()
        .map(|r| r.rows()[0].clone());
    let facility_projections: Vec<f64> = match &principal {
        Some(y) => portfolio
            .facilities
            .iter()
            .map(|f| {
                f.dense_loadings(dim)
                    .iter()
                    .zip(y)
                    .map(|(b, yk)| b * yk)
                    .sum()
            })
            .collect(),
        None => vec![0.0; portfolio.facilities.len()],
    };

    let mut artifact = AnalysisArtifact {
        manifest: RunManifest {
            command: "analyze".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            config: serde_json::to_value(cfg).expect("config serializes"),
            inputs,
            timings_ms: None,
        },
        report: analysis.report,
        principal_factor: principal,
        facility_projections,
    };
    artifact.manifest.timings_ms = timings.into_map();

    let report_path = out_dir.join("analysis.json");
    let csv_path = out_dir.join("analysis_contributions.csv");
    write_text(&report_path, &to_pretty_json(&artifact))?;
    write_text(&csv_path, &artifact.report.contributions_csv())?;
    Ok(AnalyzeOutcome {
        report_path,
        csv_path,
        report: artifact.report,
    })
}

pub struct SimulateOutcome {
    pub result_path: PathBuf,
    pub csv_path: PathBuf,
    pub result: SimResult,
}

pub fn cmd_simulate(
    portfolio_path: &Path,
    factors_path: &Path,
    cfg: &SimConfig,
    out_dir: &Path,
    deterministic: bool,
) -> Result<SimulateOutcome> {
    let mut timings = Timings::new(!deterministic);
    timings.stage("load");
    let (portfolio, inputs) = load_inputs(portfolio_path, factors_path)?;

    timings.stage("simulate");
    let result = simulate(&portfolio, cfg)?;

    timings.stage("write");
    let mut artifact = SimulationArtifact {
        manifest: RunManifest {
            command: "simulate".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            config: serde_json::to_value(cfg).expect("config serializes"),
            inputs,
            timings_ms: None,
        },
        result,
    };
    artifact.manifest.timings_ms = timings.into_map();

    let result_path = out_dir.join("simulation.json");
    let csv_path = out_dir.join("simulation_contributions.csv");
    let mut csv = String::from("id,contribution,std_error\n");
    for c in &artifact.result.contributions {
        csv.push_str(&format!("{},{},{}\n", c.id, c.contribution, c.std_error));
    }
    write_text(&result_path, &to_pretty_json(&artifact))?;
    write_text(&csv_path, &csv)?;
    Ok(SimulateOutcome {
        result_path,
        csv_path,
        result: artifact.result,
    })
}

/// Analytic vs simulated for one tail measure, judged against the
/// simulation's standard error.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MeasureDiff {
    pub analytic: f64,
    pub simulated: f64,
    pub std_error: f64,
    pub diff: f64,
    /// (analytic - simulated) / simulated; null when the base is zero.
    pub rel_diff: Option<f64>,
    pub within_3se: bool,
}

/// Plain value comparison for quantities without a meaningful standard
/// error, like the expected value.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ValueDiff {
    pub analytic: f64,
    pub simulated: f64,
    pub diff: f64,
    pub rel_diff: Option<f64>,
}

fn measure_diff(analytic: f64, simulated: f64, std_error: f64) -> MeasureDiff {
    let diff = analytic - simulated;
    MeasureDiff {
        analytic,
        simulated,
        std_error,
        diff,
        rel_diff: (simulated != 0.0).then(|| diff / simulated),
        within_3se: diff.abs() <= 3.0 * std_error,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FacilityDiff {
    pub id: String,
    /// Loading projection on the principal factor; the plot x-axis.
    pub projection: f64,
    pub analytic: f64,
    pub simulated: f64,
    pub std_error: f64,
    pub rel_diff: Option<f64>,
    pub outside_3se: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompareSummary {
    pub facilities: usize,
    pub outside_3se: usize,
    pub rel_diff_p10: Option<f64>,
    pub rel_diff_p50: Option<f64>,
    pub rel_diff_p90: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompareArtifact {
    pub manifest: RunManifest,
    pub expected_value: ValueDiff,
    pub var: MeasureDiff,
    pub es: MeasureDiff,
    pub summary: CompareSummary,
    pub facilities: Vec<FacilityDiff>,
}

fn percentile(sorted: &[f64], q: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let pos = (q * (sorted.len() - 1) as f64).round() as usize;
    Some(sorted[pos])
}

pub struct CompareOutcome {
    pub json_path: PathBuf,
    pub csv_path: PathBuf,
    pub artifact: CompareArtifact,
}

pub fn cmd_compare(
    analysis_path: &Path,
    simulation_path: &Path,
    out_dir: &Path,
) -> Result<CompareOutcome> {
    let a: AnalysisArtifact = from_json(analysis_path, &read_text(analysis_path)?)?;
    let s: SimulationArtifact = from_json(simulation_path, &read_text(simulation_path)?)?;

    let pa = a.manifest.digest_for("portfolio")?;
    let ps = s.manifest.digest_for("portfolio")?;
    if pa != ps {
        return Err(CriskError::Config(format!(
            "portfolio digests differ between the two runs: {pa} vs {ps}"
        )));
    }

    let r = &a.report;
    let m = &s.result;
    let ev_diff = r.expected_value - m.expected_value;
    let expected_value = ValueDiff {
        analytic: r.expected_value,
        simulated: m.expected_value,
        diff: ev_diff,
        rel_diff: (m.expected_value != 0.0).then(|| ev_diff / m.expected_value),
    };
    let var = measure_diff(r.var_total, m.var_estimate, m.var_std_error);
    let es = measure_diff(r.es_total, m.es_estimate, m.es_std_error);

    let mut sim_by_id = std::collections::HashMap::new();
    for c in &m.contributions {
        sim_by_id.insert(c.id.as_str(), c);
    }
    let mut facilities = Vec::with_capacity(r.contributions.len());
    for (i, c) in r.contributions.iter().enumerate() {
        let mc = sim_by_id.remove(c.id.as_str()).ok_or_else(|| {
            CriskError::Config(format!("facility {} missing from the simulation", c.id))
        })?;
        let diff = c.var_c - mc.contribution;
        facilities.push(FacilityDiff {
            id: c.id.clone(),
            projection: a.facility_projections.get(i).copied().unwrap_or(0.0),
            analytic: c.var_c,
            simulated: mc.contribution,
            std_error: mc.std_error,
            rel_diff: (mc.contribution != 0.0).then(|| diff / mc.contribution),
            outside_3se: diff.abs() > 3.0 * mc.std_error,
        });
    }
    if !sim_by_id.is_empty() {
        let mut extra: Vec<&str> = sim_by_id.keys().copied().collect();
        extra.sort_unstable();
        return Err(CriskError::Config(format!(
            "simulation carries facilities the analysis lacks: {}",
            extra.join(", ")
        )));
    }
    facilities.sort_by(|x, y| {
        x.projection
            .total_cmp(&y.projection)
            .then_with(|| x.id.cmp(&y.id))
    });

    let mut rels: Vec<f64> = facilities.iter().filter_map(|f| f.rel_diff).collect();
    rels.sort_by(f64::total_cmp);
    let summary = CompareSummary {
        facilities: facilities.len(),
        outside_3se: facilities.iter().filter(|f| f.outside_3se).count(),
        rel_diff_p10: percentile(&rels, 0.1),
        rel_diff_p50: percentile(&rels, 0.5),
        rel_diff_p90: percentile(&rels, 0.9),
    };

    let artifact = CompareArtifact {
        manifest: RunManifest {
            command: "compare".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            config: serde_json::Value::Null,
            inputs: vec![
                digest_file("analysis", analysis_path)?,
                digest_file("simulation", simulation_path)?,
            ],
            timings_ms: None,
        },
        expected_value,
        var,
        es,
        summary,
        facilities,
    };

    let json_path = out_dir.join("compare.json");
    let csv_path = out_dir.join("compare_facilities.csv");
    let mut csv = String::from("id,projection,analytic,simulated,std_error,rel_diff,outside_3se\n");
    for f in &artifact.facilities {
        let rel = f.rel_diff.map(|r| r.to_string()).unwrap_or_default();
        csv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            f.id, f.projection, f.analytic, f.simulated, f.std_error, rel, f.outside_3se
        ));
    }
    write_text(&json_path, &to_pretty_json(&artifact))?;
    write_text(&csv_path, &csv)?;
    Ok(CompareOutcome {
        json_path,
        csv_path,
        artifact,
    })
}

pub struct GenerateParams {
    pub kind: String,
    pub regions: usize,
    pub industries: usize,
    pub loans: usize,
    pub block: usize,
    pub dominant: usize,
    pub rho: f64,
    pub pd: f64,
    pub seed: u64,
    pub region_share: f64,
    pub common_share: f64,
}

pub fn cmd_generate(
    params: &GenerateParams,
    portfolio_path: &Path,
    factors_path: &Path,
) -> Result<Portfolio> {
    let kind = match params.kind.as_str() {
        "diversified" => BenchmarkKind::Diversified,
        "concentrated" => BenchmarkKind::Concentrated {
            block: params.block,
        },
        "heterogeneous" => BenchmarkKind::Heterogeneous {
            dominant: params.dominant,
        },
        other => {
            return Err(CriskError::Config(format!(
                "unknown benchmark kind {other:?}; expected diversified, concentrated or heterogeneous"
            )))
        }
    };
    let mut spec = BenchmarkSpec::new(kind, params.regions, params.industries, params.loans);
    spec.rho = params.rho;
    spec.pd = params.pd;
    spec.seed = params.seed;
    spec.region_share = params.region_share;
    spec.common_share = params.common_share;
    let portfolio = synthesize_benchmark(&spec)?;
    save_portfolio(&portfolio, portfolio_path, factors_path)?;
    Ok(portfolio)
}
