//! Configuration layering: engine defaults, then the TOML file, then flags.

use std::fs;
use std::path::Path;

use crisk_core::risk::OrderFlags;
use crisk_core::{CriskError, GaCaps, Result, RiskConfig, SimConfig, SimMode};
use serde::Deserialize;

/// Optional-everything mirror of the tunable knobs, as read from TOML.
/// Absent fields fall through to the layer below.
#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    #[serde(default)]
    pub analyze: AnalyzeFile,
    #[serde(default)]
    pub simulate: SimulateFile,
}

#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalyzeFile {
    pub alpha: Option<f64>,
    pub confidence: Option<f64>,
    pub orders: Option<Vec<String>>,
    pub tensor_order: Option<usize>,
    pub onef_order: Option<usize>,
    pub cond_cap: Option<usize>,
    pub k_cap: Option<usize>,
    pub series_order: Option<usize>,
    pub z_nodes: Option<usize>,
}

#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateFile {
    pub alpha: Option<f64>,
    pub confidence: Option<f64>,
    pub scenarios: Option<u64>,
    pub seed: Option<u64>,
    pub mode: Option<String>,
    pub window: Option<(f64, f64)>,
    pub batch: Option<u64>,
}

pub fn load_file_config(path: Option<&Path>) -> Result<FileConfig> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = fs::read_to_string(path).map_err(|source| CriskError::Io {
        path: path.display().to_string(),
        source,
    })?;
    toml::from_str(&text).map_err(|e| CriskError::Format {
        path: path.display().to_string(),
        detail: e.to_string(),
    })
}

/// Tail probability from a confidence level given as a fraction (0.999) or
/// a percentage (99.9).
pub fn alpha_from_confidence(c: f64) -> Result<f64> {
    let frac = if c > 1.0 { c / 100.0 } else { c };
    if !(frac > 0.5 && frac < 1.0) {
        return Err(CriskError::Config(format!(
            "confidence {c} must lie in (0.5, 1) or (50, 100)"
        )));
    }
    Ok(1.0 - frac)
}

/// Flags win over the file; within one layer an explicit alpha wins over a
/// confidence level.
pub fn resolve_alpha(
    flag_alpha: Option<f64>,
    flag_confidence: Option<f64>,
    file_alpha: Option<f64>,
    file_confidence: Option<f64>,
    fallback: f64,
) -> Result<f64> {
    if let Some(a) = flag_alpha {
        return Ok(a);
    }
    if let Some(c) = flag_confidence {
        return alpha_from_confidence(c);
    }
    if let Some(a) = file_alpha {
        return Ok(a);
    }
    if let Some(c) = file_confidence {
        return alpha_from_confidence(c);
    }
    Ok(fallback)
}

pub fn parse_orders(tokens: &[String]) -> Result<OrderFlags> {
    let mut flags = OrderFlags {
        onef: false,
        mf2: false,
        mf3: false,
        ga2: false,
        ga3: false,
    };
    for raw in tokens {
        for t in raw.split(',').filter(|t| !t.is_empty()) {
            match t.trim() {
                "1f" => flags.onef = true,
                "mf2" => flags.mf2 = true,
                "mf3" => flags.mf3 = true,
                "ga2" => flags.ga2 = true,
                "ga3" => flags.ga3 = true,
                other => {
                    return Err(CriskError::Config(format!(
                        "unknown order {other:?}; expected 1f, mf2, mf3, ga2, ga3"
                    )))
                }
            }
        }
    }
    Ok(flags)
}

pub fn parse_mode(s: &str) -> Result<SimMode> {
    match s {
        "systematic" => Ok(SimMode::Systematic),
        "full" => Ok(SimMode::Full),
        other => Err(CriskError::Config(format!(
            "unknown mode {other:?}; expected systematic or full"
        ))),
    }
}

/// "lo:hi" in tail probability units.
pub fn parse_window(s: &str) -> Result<(f64, f64)> {
    let bad = || CriskError::Config(format!("window {s:?} must look like lo:hi"));
    let (lo, hi) = s.split_once(':').ok_or_else(bad)?;
    let lo: f64 = lo.trim().parse().map_err(|_| bad())?;
    let hi: f64 = hi.trim().parse().map_err(|_| bad())?;
    Ok((lo, hi))
}

/// Flag-level analyze overrides, already parsed.
#[derive(Debug, Default, Clone)]
pub struct AnalyzeOverrides {
    pub alpha: Option<f64>,
    pub confidence: Option<f64>,
    pub orders: Option<String>,
    pub tensor_order: Option<usize>,
    pub onef_order: Option<usize>,
    pub cond_cap: Option<usize>,
    pub k_cap: Option<usize>,
    pub series_order: Option<usize>,
    pub z_nodes: Option<usize>,
}

pub fn build_risk_config(file: &AnalyzeFile, flags: &AnalyzeOverrides) -> Result<RiskConfig> {
    let mut cfg = RiskConfig::default();
    cfg.alpha = resolve_alpha(
        flags.alpha,
        flags.confidence,
        file.alpha,
        file.confidence,
        cfg.alpha,
    )?;
    if let Some(tokens) = &file.orders {
        cfg.orders = parse_orders(tokens)?;
    }
    if let Some(list) = &flags.orders {
        cfg.orders = parse_orders(std::slice::from_ref(list))?;
    }
    let exp = &mut cfg.expansion;
    exp.tensor_order = flags.tensor_order.or(file.tensor_order).unwrap_or(exp.tensor_order);
    exp.onef_order = flags.onef_order.or(file.onef_order).unwrap_or(exp.onef_order);
    exp.cond_cap = flags.cond_cap.or(file.cond_cap).unwrap_or(exp.cond_cap);
    let ga: &mut GaCaps = &mut cfg.ga;
    ga.k_cap = flags.k_cap.or(file.k_cap).unwrap_or(ga.k_cap);
    ga.series_order = flags.series_order.or(file.series_order).unwrap_or(ga.series_order);
    ga.z_nodes = flags.z_nodes.or(file.z_nodes).unwrap_or(ga.z_nodes);
    cfg.validate()?;
    Ok(cfg)
}

/// Flag-level simulate overrides, with the window still in lo:hi text form.
#[derive(Debug, Default, Clone)]
pub struct SimulateOverrides {
    pub alpha: Option<f64>,
    pub confidence: Option<f64>,
    pub scenarios: Option<u64>,
    pub seed: Option<u64>,
    pub mode: Option<String>,
    pub window: Option<String>,
    pub batch: Option<u64>,
}

pub fn build_sim_config(file: &SimulateFile, flags: &SimulateOverrides) -> Result<SimConfig> {
    let defaults = SimConfig::default();
    let alpha = resolve_alpha(
        flags.alpha,
        flags.confidence,
        file.alpha,
        file.confidence,
        defaults.alpha,
    )?;
    // Rebase on the resolved alpha so the default window tracks it.
    let mut cfg = SimConfig::new(defaults.mode, defaults.scenarios, defaults.seed, alpha);
    cfg.batch = defaults.batch;
    if let Some(m) = &file.mode {
        cfg.mode = parse_mode(m)?;
    }
    if let Some(m) = &flags.mode {
        cfg.mode = parse_mode(m)?;
    }
    cfg.scenarios = flags.scenarios.or(file.scenarios).unwrap_or(cfg.scenarios);
    cfg.seed = flags.seed.or(file.seed).unwrap_or(cfg.seed);
    cfg.batch = flags.batch.or(file.batch).unwrap_or(cfg.batch);
    if let Some(w) = file.window {
        cfg.window = w;
    }
    if let Some(w) = &flags.window {
        cfg.window = parse_window(w)?;
    }
    cfg.validate()?;
    Ok(cfg)
}
