//! Portfolio data model: factor model, facility valuation specs, validation
//! and file round-tripping.
//!
//! A facility's horizon value is a function of a single standard normal
//! driver eps = rho * (beta . eta) + sqrt(1 - rho^2) * xi. The spec kinds
//! cover the cases the engine knows how to expand: a default indicator, a
//! general step function, and a sampled curve interpolated linearly with
//! flat extrapolation.

use std::collections::BTreeMap;
use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CriskError, Result, Violation};
use crate::gaussian::{norm_cdf, norm_inv_cdf};
use crate::quadrature::QuadratureRule;

/// Loading-norm tolerance for Eq.-style unit normalization.
pub const LOADING_NORM_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorModel {
    factors: Vec<String>,
}

impl FactorModel {
    pub fn new(factors: Vec<String>) -> Result<Self> {
        if factors.is_empty() {
            return Err(CriskError::Config("factor model needs at least one factor".into()));
        }
        let mut seen = HashSet::new();
        for f in &factors {
            if !seen.insert(f.as_str()) {
                return Err(CriskError::Config(format!("duplicate factor name {f:?}")));
            }
        }
        Ok(FactorModel { factors })
    }

    pub fn n_factors(&self) -> usize {
        self.factors.len()
    }

    pub fn names(&self) -> &[String] {
        &self.factors
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CriskError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        let raw: FactorModel = serde_json::from_str(&text).map_err(|e| CriskError::Format {
            path: path.display().to_string(),
            detail: e.to_string(),
        })?;
        FactorModel::new(raw.factors)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("factor model serializes");
        std::fs::write(path, text).map_err(|e| CriskError::Io {
            path: path.display().to_string(),
            source: e,
        })
    }
}

/// Horizon-value function of the facility's normal driver.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ValueSpec {
    /// Two-state default/performing split at the pd-implied threshold.
    DefaultIndicator {
        pd: f64,
        performing: f64,
        defaulted: f64,
    },
    /// Piecewise-constant value; `values[j]` holds on (thresholds[j-1], thresholds[j]).
    StepFunction {
        thresholds: Vec<f64>,
        values: Vec<f64>,
    },
    /// Piecewise-linear interpolation through (eps, value) samples, flat
    /// beyond the sampled range.
    SampledCurve { eps: Vec<f64>, values: Vec<f64> },
}

impl ValueSpec {
    /// Structural problems, as violation rule/detail pairs.
    pub fn check(&self) -> Vec<(&'static str, String)> {
        let mut out = Vec::new();
        let finite = |vs: &[f64]| vs.iter().all(|v| v.is_finite());
        match self {
            ValueSpec::DefaultIndicator { pd, performing, defaulted } => {
                if !(*pd > 0.0 && *pd < 1.0) {
                    out.push(("pd-range", format!("pd {pd} outside (0,1)")));
                }
                if !performing.is_finite() || !defaulted.is_finite() {
                    out.push(("value-finite", "non-finite indicator value".into()));
                }
            }
            ValueSpec::StepFunction { thresholds, values } => {
                if values.len() != thresholds.len() + 1 {
                    out.push((
                        "step-shape",
                        format!(
                            "{} thresholds need {} values, got {}",
                            thresholds.len(),
                            thresholds.len() + 1,
                            values.len()
                        ),
                    ));
                }
                if !thresholds.windows(2).all(|w| w[0] < w[1]) {
                    out.push(("thresholds-increasing", "thresholds not strictly increasing".into()));
                }
                if !finite(thresholds) || !finite(values) {
                    out.push(("value-finite", "non-finite step data".into()));
                }
            }
            ValueSpec::SampledCurve { eps, values } => {
                if eps.len() != values.len() {
                    out.push((
                        "curve-shape",
                        format!("{} abscissae vs {} values", eps.len(), values.len()),
                    ));
                } else if eps.is_empty() {
                    out.push(("curve-shape", "empty curve".into()));
                }
                if !eps.windows(2).all(|w| w[0] < w[1]) {
                    out.push(("curve-increasing", "curve abscissae not strictly increasing".into()));
                }
                if !finite(eps) || !finite(values) {
                    out.push(("value-finite", "non-finite curve data".into()));
                }
            }
        }
        out
    }

    /// Canonical step form: (thresholds, interval values), lowest interval
    /// first. None for curves.
    pub fn as_steps(&self) -> Option<(Vec<f64>, Vec<f64>)> {
        match self {
            ValueSpec::DefaultIndicator { pd, performing, defaulted } => Some((
                vec![norm_inv_cdf(*pd).expect("pd validated")],
                vec![*defaulted, *performing],
            )),
            ValueSpec::StepFunction { thresholds, values } => {
                Some((thresholds.clone(), values.clone()))
            }
            ValueSpec::SampledCurve { .. } => None,
        }
    }

    /// Pointwise value at a driver realization.
    pub fn evaluate(&self, eps: f64) -> f64 {
        match self {
            ValueSpec::DefaultIndicator { pd, performing, defaulted } => {
                let c = norm_inv_cdf(*pd).expect("pd validated");
                if eps < c {
                    *defaulted
                } else {
                    *performing
                }
            }
            ValueSpec::StepFunction { thresholds, values } => {
                let j = thresholds.partition_point(|&t| t <= eps);
                values[j]
            }
            ValueSpec::SampledCurve { eps: xs, values } => {
                if eps <= xs[0] {
                    return values[0];
                }
                if eps >= xs[xs.len() - 1] {
                    return values[values.len() - 1];
                }
                let j = xs.partition_point(|&x| x <= eps);
                let (x0, x1) = (xs[j - 1], xs[j]);
                let (v0, v1) = (values[j - 1], values[j]);
                v0 + (v1 - v0) * (eps - x0) / (x1 - x0)
            }
        }
    }
}

/// E[v(eps)] under a standard normal driver; closed form for steps, a
/// 256-node rule for curves.
pub fn expected_value(spec: &ValueSpec) -> f64 {
    if let Some((thresholds, values)) = spec.as_steps() {
        let mut acc = 0.0;
        let mut lower = 0.0; // Phi(-inf)
        for (j, &v) in values.iter().enumerate() {
            let upper = if j < thresholds.len() {
                norm_cdf(thresholds[j])
            } else {
                1.0
            };
            acc += v * (upper - lower);
            lower = upper;
        }
        acc
    } else {
        let rule = QuadratureRule::gauss_hermite(256).expect("fixed rule");
        rule.integrate(|x| spec.evaluate(x))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Facility {
    pub id: String,
    pub weight: f64,
    pub rho: f64,
    /// Sparse factor loadings, sorted by factor index.
    pub loadings: Vec<(usize, f64)>,
    pub value: ValueSpec,
}

impl Facility {
    /// beta . eta for a dense factor draw.
    pub fn project(&self, eta: &[f64]) -> f64 {
        self.loadings.iter().map(|&(k, b)| b * eta[k]).sum()
    }

    /// Dense copy of the loading vector.
    pub fn dense_loadings(&self, dim: usize) -> Vec<f64> {
        let mut out = vec![0.0; dim];
        for &(k, b) in &self.loadings {
            if k < dim {
                out[k] = b;
            }
        }
        out
    }

    pub fn loading_norm_sq(&self) -> f64 {
        self.loadings.iter().map(|&(_, b)| b * b).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Portfolio {
    pub facilities: Vec<Facility>,
    pub factor_model: FactorModel,
}

impl Portfolio {
    pub fn n_factors(&self) -> usize {
        self.factor_model.n_factors()
    }

    /// Sum of weighted expected facility values.
    pub fn expected_value(&self) -> f64 {
        self.facilities
            .iter()
            .map(|f| f.weight * expected_value(&f.value))
            .sum()
    }
}

/// Invariant check; violations are data, not faults.
pub fn validate(portfolio: &Portfolio) -> Vec<Violation> {
    let mut out = Vec::new();
    let nf = portfolio.n_factors();
    if portfolio.facilities.is_empty() {
        out.push(Violation {
            facility: None,
            rule: "empty-portfolio",
            detail: "portfolio has no facilities".into(),
        });
    }
    let mut ids = HashSet::new();
    for f in &portfolio.facilities {
        let mut push = |rule: &'static str, detail: String| {
            out.push(Violation {
                facility: Some(f.id.clone()),
                rule,
                detail,
            });
        };
        if !ids.insert(f.id.as_str()) {
            push("id-unique", "duplicate facility id".into());
        }
        if !(f.weight > 0.0 && f.weight.is_finite()) {
            push("weight-positive", format!("weight {}", f.weight));
        }
        if !(f.rho.abs() < 1.0) {
            push("rho-bound", format!("|rho| = {} not < 1", f.rho.abs()));
        }
        let norm = f.loading_norm_sq();
        if (norm - 1.0).abs() > LOADING_NORM_TOL {
            push("loading-norm", format!("sum of squared loadings {norm}"));
        }
        for &(k, b) in &f.loadings {
            if k >= nf {
                push("loading-index", format!("factor index {k} >= {nf}"));
            }
            if !b.is_finite() {
                push("value-finite", format!("loading at {k} not finite"));
            }
        }
        if !f
            .loadings
            .windows(2)
            .all(|w| w[0].0 < w[1].0)
        {
            push("loading-order", "loading indices not strictly increasing".into());
        }
        for (rule, detail) in f.value.check() {
            push(rule, detail);
        }
    }
    out
}

// ---------------------------------------------------------------------------
// File format: facilities CSV + factor model JSON.

fn format_list(xs: &[f64]) -> String {
    xs.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join("|")
}

fn parse_list(s: &str, path: &str, what: &str) -> Result<Vec<f64>> {
    s.split('|')
        .map(|t| {
            t.trim().parse::<f64>().map_err(|_| CriskError::Format {
                path: path.to_string(),
                detail: format!("bad {what} entry {t:?}"),
            })
        })
        .collect()
}

fn value_kind_and_params(spec: &ValueSpec) -> (&'static str, String) {
    match spec {
        ValueSpec::DefaultIndicator { pd, performing, defaulted } => (
            "default_indicator",
            format!("pd={pd};performing={performing};defaulted={defaulted}"),
        ),
        ValueSpec::StepFunction { thresholds, values } => (
            "step",
            format!(
                "thresholds={};values={}",
                format_list(thresholds),
                format_list(values)
            ),
        ),
        ValueSpec::SampledCurve { eps, values } => (
            "curve",
            format!("eps={};values={}", format_list(eps), format_list(values)),
        ),
    }
}

fn parse_value_spec(kind: &str, params: &str, path: &str) -> Result<ValueSpec> {
    let mut map = BTreeMap::new();
    for pair in params.split(';').filter(|p| !p.is_empty()) {
        let (k, v) = pair.split_once('=').ok_or_else(|| CriskError::Format {
            path: path.to_string(),
            detail: format!("value_params pair {pair:?} missing '='"),
        })?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    let take = |map: &BTreeMap<String, String>, key: &str| -> Result<String> {
        map.get(key).cloned().ok_or_else(|| CriskError::Format {
            path: path.to_string(),
            detail: format!("value_params missing {key:?} for kind {kind:?}"),
        })
    };
    let scalar = |map: &BTreeMap<String, String>, key: &str| -> Result<f64> {
        take(map, key)?.parse::<f64>().map_err(|_| CriskError::Format {
            path: path.to_string(),
            detail: format!("value_params {key:?} not a number"),
        })
    };
    match kind {
        "default_indicator" => Ok(ValueSpec::DefaultIndicator {
            pd: scalar(&map, "pd")?,
            performing: scalar(&map, "performing")?,
            defaulted: scalar(&map, "defaulted")?,
        }),
        "step" => Ok(ValueSpec::StepFunction {
            thresholds: parse_list(&take(&map, "thresholds")?, path, "threshold")?,
            values: parse_list(&take(&map, "values")?, path, "value")?,
        }),
        "curve" => Ok(ValueSpec::SampledCurve {
            eps: parse_list(&take(&map, "eps")?, path, "eps")?,
            values: parse_list(&take(&map, "values")?, path, "value")?,
        }),
        other => Err(CriskError::Format {
            path: path.to_string(),
            detail: format!("unknown value_kind {other:?}"),
        }),
    }
}

fn format_loadings(loadings: &[(usize, f64)]) -> String {
    loadings
        .iter()
        .map(|(k, b)| format!("{k}:{b}"))
        .collect::<Vec<_>>()
        .join(";")
}

fn parse_loadings(s: &str, path: &str) -> Result<Vec<(usize, f64)>> {
    let mut out = Vec::new();
    for pair in s.split(';').filter(|p| !p.is_empty()) {
        let (k, b) = pair.split_once(':').ok_or_else(|| CriskError::Format {
            path: path.to_string(),
            detail: format!("loading pair {pair:?} missing ':'"),
        })?;
        let k = k.trim().parse::<usize>().map_err(|_| CriskError::Format {
            path: path.to_string(),
            detail: format!("loading index {k:?} not an integer"),
        })?;
        let b = b.trim().parse::<f64>().map_err(|_| CriskError::Format {
            path: path.to_string(),
            detail: format!("loading value {b:?} not a number"),
        })?;
        out.push((k, b));
    }
    out.sort_by_key(|&(k, _)| k);
    Ok(out)
}

pub fn save_portfolio(portfolio: &Portfolio, csv_path: &Path, factors_path: &Path) -> Result<()> {
    portfolio.factor_model.save(factors_path)?;
    let mut wtr = csv::Writer::from_path(csv_path).map_err(|e| CriskError::Io {
        path: csv_path.display().to_string(),
        source: std::io::Error::other(e),
    })?;
    let io_err = |e: csv::Error| CriskError::Io {
        path: csv_path.display().to_string(),
        source: std::io::Error::other(e),
    };
    wtr.write_record(["id", "weight", "rho", "value_kind", "value_params", "loadings"])
        .map_err(io_err)?;
    for f in &portfolio.facilities {
        let (kind, params) = value_kind_and_params(&f.value);
        wtr.write_record([
            f.id.as_str(),
            &f.weight.to_string(),
            &f.rho.to_string(),
            kind,
            &params,
            &format_loadings(&f.loadings),
        ])
        .map_err(io_err)?;
    }
    wtr.flush().map_err(|e| CriskError::Io {
        path: csv_path.display().to_string(),
        source: e,
    })
}

pub fn load_portfolio(csv_path: &Path, factors_path: &Path) -> Result<Portfolio> {
    let factor_model = FactorModel::load(factors_path)?;
    let path = csv_path.display().to_string();
    let mut rdr = csv::Reader::from_path(csv_path).map_err(|e| CriskError::Io {
        path: path.clone(),
        source: std::io::Error::other(e),
    })?;
    let headers = rdr
        .headers()
        .map_err(|e| CriskError::Format {
            path: path.clone(),
            detail: e.to_string(),
        })?
        .clone();
    let expect = ["id", "weight", "rho", "value_kind", "value_params", "loadings"];
    if headers.iter().ne(expect) {
        return Err(CriskError::Format {
            path,
            detail: format!("header {headers:?}, expected {expect:?}"),
        });
    }
    let mut facilities = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| CriskError::Format {
            path: path.clone(),
            detail: format!("row {}: {e}", line + 2),
        })?;
        let field = |i: usize| rec.get(i).unwrap_or("").to_string();
        let number = |i: usize, what: &str| -> Result<f64> {
            rec.get(i)
                .unwrap_or("")
                .parse::<f64>()
                .map_err(|_| CriskError::Format {
                    path: path.clone(),
                    detail: format!("row {}: bad {what}", line + 2),
                })
        };
        facilities.push(Facility {
            id: field(0),
            weight: number(1, "weight")?,
            rho: number(2, "rho")?,
            loadings: parse_loadings(&field(5), &path)?,
            value: parse_value_spec(&field(3), &field(4), &path)?,
        });
    }
    Ok(Portfolio {
        facilities,
        factor_model,
    })
}
