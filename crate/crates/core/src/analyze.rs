//! End-to-end analytic pipeline: validate, expand, rotate, split, measure.
//!
//! `analyze` strings the engine modules together in their one canonical
//! order. Facility value profiles are expanded once, to the highest order
//! any consumer needs; the portfolio variance runs on the pairwise kernel
//! in the original basis (it is rotation invariant), while the tail
//! measures run on the rotated portfolio whose first factor carries the
//! whole first-order response. Every enabled adjustment lands in its own
//! breakdown slot, and totals are the plain sums of the slots, so the
//! report can never disagree with itself.

use crate::coeffs::{facility_coefficients, CoefficientSet};
use crate::error::{CriskError, Result};
use crate::expansion::{portfolio_tensors, tail_split};
use crate::idio::allocate_idio;
use crate::portfolio::{validate, Portfolio};
use crate::risk::{
    allocate_adjustments, portfolio_sigma, var_es_1f, FacilityContribution, OrderBreakdown,
    RiskConfig, RiskReport,
};
use crate::rotation::{rotate_portfolio, rotation_from_v1, Rotation};

/// Analysis output plus the geometry it was computed in. The rotation is
/// `None` when the portfolio has no first-order factor response (constant
/// values), in which case the report is all zeros.
#[derive(Debug, Clone)]
pub struct Analysis {
    pub report: RiskReport,
    pub rotation: Option<Rotation>,
}

/// Full analytic report for a portfolio under the given configuration.
pub fn analyze(portfolio: &Portfolio, cfg: &RiskConfig) -> Result<RiskReport> {
    analyze_full(portfolio, cfg).map(|a| a.report)
}

pub fn analyze_full(portfolio: &Portfolio, cfg: &RiskConfig) -> Result<Analysis> {
    cfg.validate()?;
    let violations = validate(portfolio);
    if !violations.is_empty() {
        return Err(CriskError::Validation(violations));
    }

    let coeffs = expand_all(portfolio, cfg)?;
    let v1 = portfolio_tensors(portfolio, &coeffs, 1)?[0].to_vector();
    if v1.iter().all(|&x| x == 0.0) {
        // Constant values everywhere: nothing to rotate onto, nothing at
        // risk. Report zeros rather than a degenerate-direction error.
        let report = RiskReport {
            alpha: cfg.alpha,
            expected_value: portfolio.expected_value(),
            sigma: 0.0,
            var_total: 0.0,
            es_total: 0.0,
            var_parts: OrderBreakdown::default(),
            es_parts: OrderBreakdown::default(),
            contributions: portfolio
                .facilities
                .iter()
                .map(|f| FacilityContribution {
                    id: f.id.clone(),
                    sigma_c: 0.0,
                    var_c: 0.0,
                    es_c: 0.0,
                    var_parts: OrderBreakdown::default(),
                    es_parts: OrderBreakdown::default(),
                })
                .collect(),
        };
        return Ok(Analysis {
            report,
            rotation: None,
        });
    }

    let rotation = rotation_from_v1(&v1)?;
    let report = measure(portfolio, cfg, &coeffs, &rotation)?;
    Ok(Analysis {
        report,
        rotation: Some(rotation),
    })
}

/// The pipeline with a caller-supplied frame instead of the derived one.
/// Euler contributions hold the frame fixed, so their finite-difference
/// oracle must perturb weights under the same frozen rotation; this entry
/// exists for exactly that comparison, and for frame sensitivity studies.
pub fn analyze_with_rotation(
    portfolio: &Portfolio,
    cfg: &RiskConfig,
    rotation: &Rotation,
) -> Result<RiskReport> {
    cfg.validate()?;
    let violations = validate(portfolio);
    if !violations.is_empty() {
        return Err(CriskError::Validation(violations));
    }
    let coeffs = expand_all(portfolio, cfg)?;
    measure(portfolio, cfg, &coeffs, rotation)
}

/// One expansion serves every consumer: the tail split needs the tensor
/// and principal orders, sigma and the granularity series run deeper.
fn expand_all(portfolio: &Portfolio, cfg: &RiskConfig) -> Result<Vec<CoefficientSet>> {
    let order = cfg
        .expansion
        .required_coeff_order()
        .max(cfg.ga.series_order);
    portfolio
        .facilities
        .iter()
        .map(|f| facility_coefficients(&f.value, order))
        .collect()
}

fn measure(
    portfolio: &Portfolio,
    cfg: &RiskConfig,
    coeffs: &[CoefficientSet],
    rotation: &Rotation,
) -> Result<RiskReport> {
    let order = cfg
        .expansion
        .required_coeff_order()
        .max(cfg.ga.series_order);
    let expected_value = portfolio.expected_value();
    let sigma = portfolio_sigma(portfolio, coeffs, order)?;
    let rotated = rotate_portfolio(portfolio, rotation)?;
    let tc = tail_split(&rotated, coeffs, &cfg.expansion)?;

    let onef = var_es_1f(&tc, cfg.alpha)?;
    let flags = cfg.orders;
    let adj = if flags.mf2 || flags.mf3 {
        Some(allocate_adjustments(&tc, cfg.alpha)?)
    } else {
        None
    };
    let ga = if flags.ga2 || flags.ga3 {
        Some(allocate_idio(&rotated, &tc, cfg.alpha, &cfg.ga)?)
    } else {
        None
    };

    let gate = |on: bool, x: f64| if on { x } else { 0.0 };
    let var_parts = OrderBreakdown {
        onef: onef.var,
        mf2: gate(flags.mf2, adj.as_ref().map_or(0.0, |a| a.var2_total)),
        mf3: gate(flags.mf3, adj.as_ref().map_or(0.0, |a| a.var3_total)),
        ga2: gate(flags.ga2, ga.as_ref().map_or(0.0, |g| g.var2_total)),
        ga3: gate(flags.ga3, ga.as_ref().map_or(0.0, |g| g.var3_total)),
    };
    let es_parts = OrderBreakdown {
        onef: onef.es,
        mf2: gate(flags.mf2, adj.as_ref().map_or(0.0, |a| a.es2_total)),
        mf3: gate(flags.mf3, adj.as_ref().map_or(0.0, |a| a.es3_total)),
        ga2: gate(flags.ga2, ga.as_ref().map_or(0.0, |g| g.es2_total)),
        ga3: gate(flags.ga3, ga.as_ref().map_or(0.0, |g| g.es3_total)),
    };

    let mut contributions = Vec::with_capacity(portfolio.facilities.len());
    for (i, f) in portfolio.facilities.iter().enumerate() {
        let vp = OrderBreakdown {
            onef: onef.var_contributions[i],
            mf2: gate(flags.mf2, adj.as_ref().map_or(0.0, |a| a.var2[i])),
            mf3: gate(flags.mf3, adj.as_ref().map_or(0.0, |a| a.var3[i])),
            ga2: gate(flags.ga2, ga.as_ref().map_or(0.0, |g| g.var2[i])),
            ga3: gate(flags.ga3, ga.as_ref().map_or(0.0, |g| g.var3[i])),
        };
        let ep = OrderBreakdown {
            onef: onef.es_contributions[i],
            mf2: gate(flags.mf2, adj.as_ref().map_or(0.0, |a| a.es2[i])),
            mf3: gate(flags.mf3, adj.as_ref().map_or(0.0, |a| a.es3[i])),
            ga2: gate(flags.ga2, ga.as_ref().map_or(0.0, |g| g.es2[i])),
            ga3: gate(flags.ga3, ga.as_ref().map_or(0.0, |g| g.es3[i])),
        };
        contributions.push(FacilityContribution {
            id: f.id.clone(),
            sigma_c: sigma.contributions[i],
            var_c: vp.total(),
            es_c: ep.total(),
            var_parts: vp,
            es_parts: ep,
        });
    }

    Ok(RiskReport {
        alpha: cfg.alpha,
        expected_value,
        sigma: sigma.sigma,
        var_total: var_parts.total(),
        es_total: es_parts.total(),
        var_parts,
        es_parts,
        contributions,
    })
}
