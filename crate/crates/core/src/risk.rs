//! Portfolio risk measures and their Euler allocations: standard deviation,
//! single-factor VaR and ES on the principal series, and the second and
//! third order multi-factor adjustments built from conditional moments.
//!
//! All tail quantities live on the lower tail of the value distribution:
//! alpha is a tail probability in (0, 0.5), eta_alpha = Phi^-1(alpha), and
//! VaR/ES are reported as losses against the expected value, so both are
//! positive for a portfolio that loses money in bad states.

use crate::coeffs::CoefficientSet;
use crate::error::{CriskError, Result};
use crate::expansion::{
    ConditionalMoments, EulerBundle, ExpansionConfig, MomentWorkspace, TailCoefficients,
};
use crate::gaussian::{norm_inv_cdf, norm_pdf};
use crate::hermite::{factorial, he_row};
use crate::idio::GaCaps;
use crate::portfolio::Portfolio;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OrderFlags {
    pub onef: bool,
    pub mf2: bool,
    pub mf3: bool,
    pub ga2: bool,
    pub ga3: bool,
}

impl Default for OrderFlags {
    fn default() -> Self {
        OrderFlags {
            onef: true,
            mf2: true,
            mf3: true,
            ga2: true,
            ga3: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiskConfig {
    /// Lower-tail probability of the value distribution. A VaR confidence
    /// of 99.9% corresponds to alpha = 0.001.
    pub alpha: f64,
    pub orders: OrderFlags,
    pub expansion: ExpansionConfig,
    pub ga: GaCaps,
}

impl Default for RiskConfig {
    fn default() -> Self {
        RiskConfig {
            alpha: 0.001,
            orders: OrderFlags::default(),
            expansion: ExpansionConfig::default(),
            ga: GaCaps::default(),
        }
    }
}

impl RiskConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 0.5) {
            return Err(CriskError::Config(format!(
                "alpha must lie in (0, 0.5), got {}",
                self.alpha
            )));
        }
        if !self.orders.onef {
            return Err(CriskError::Config(
                "the single-factor order cannot be disabled".into(),
            ));
        }
        self.expansion.validate()?;
        self.ga.validate()
    }
}

/// Additive per-order terms of a tail measure. The reported total is the
/// plain sum, so total and breakdown can never disagree.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct OrderBreakdown {
    pub onef: f64,
    pub mf2: f64,
    pub mf3: f64,
    pub ga2: f64,
    pub ga3: f64,
}

impl OrderBreakdown {
    pub fn total(&self) -> f64 {
        self.onef + self.mf2 + self.mf3 + self.ga2 + self.ga3
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FacilityContribution {
    pub id: String,
    pub sigma_c: f64,
    pub var_c: f64,
    pub es_c: f64,
    pub var_parts: OrderBreakdown,
    pub es_parts: OrderBreakdown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskReport {
    pub alpha: f64,
    pub expected_value: f64,
    pub sigma: f64,
    pub var_total: f64,
    pub es_total: f64,
    pub var_parts: OrderBreakdown,
    pub es_parts: OrderBreakdown,
    pub contributions: Vec<FacilityContribution>,
}

impl RiskReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// One row per facility: id, totals, then the per-order parts.
    pub fn contributions_csv(&self) -> String {
        let mut out = String::from(
            "id,sigma_c,var_c,es_c,var_1f,var_mf2,var_mf3,var_ga2,var_ga3,\
             es_1f,es_mf2,es_mf3,es_ga2,es_ga3\n",
        );
        for c in &self.contributions {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
                c.id,
                c.sigma_c,
                c.var_c,
                c.es_c,
                c.var_parts.onef,
                c.var_parts.mf2,
                c.var_parts.mf3,
                c.var_parts.ga2,
                c.var_parts.ga3,
                c.es_parts.onef,
                c.es_parts.mf2,
                c.es_parts.mf3,
                c.es_parts.ga2,
                c.es_parts.ga3,
            ));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SigmaReport {
    pub sigma: f64,
    pub variance: f64,
    /// Euler contributions; sum to sigma. All zero for a constant portfolio.
    pub contributions: Vec<f64>,
}

fn sparse_dot(a: &[(usize, f64)], b: &[(usize, f64)]) -> f64 {
    let mut i = 0;
    let mut j = 0;
    let mut acc = 0.0;
    while i < a.len() && j < b.len() {
        match a[i].0.cmp(&b[j].0) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                acc += a[i].1 * b[j].1;
                i += 1;
                j += 1;
            }
        }
    }
    acc
}

/// Portfolio standard deviation and its Euler contributions.
///
/// Works on the pairwise kernel form: since facility values expand in the
/// scalar projections s_i = beta_i . eta with corr(s_i, s_j) = beta_i .
/// beta_j, level-n terms contribute w_i w_j (rho_i rho_j beta_i.beta_j)^n
/// v_i^(n) v_j^(n) / n! to the variance, which is the same order-n sum the
/// coefficient tensors produce but without the dense tensor cap, so the
/// series can run to `order` ~ 30 instead of 3.
pub fn portfolio_sigma(
    portfolio: &Portfolio,
    coeffs: &[CoefficientSet],
    order: usize,
) -> Result<SigmaReport> {
    if order == 0 {
        return Err(CriskError::Config("variance order must be positive".into()));
    }
    if coeffs.len() != portfolio.facilities.len() {
        return Err(CriskError::DimensionMismatch {
            expected: portfolio.facilities.len(),
            got: coeffs.len(),
        });
    }
    for cs in coeffs {
        if cs.order() < order {
            return Err(CriskError::OrderCap {
                requested: order,
                cap: cs.order(),
            });
        }
    }
    let nf = portfolio.facilities.len();
    // K[i][j] = sum_n (rho_i rho_j g_ij)^n v_i^(n) v_j^(n) / n!, j >= i
    let mut row_sums = vec![0.0; nf];
    for i in 0..nf {
        let fi = &portfolio.facilities[i];
        for j in i..nf {
            let fj = &portfolio.facilities[j];
            let g = sparse_dot(&fi.loadings, &fj.loadings);
            let x = fi.rho * fj.rho * g;
            let mut xn = 1.0;
            let mut k = 0.0;
            for n in 1..=order {
                xn *= x;
                k += xn * coeffs[i].v[n] * coeffs[j].v[n] / factorial(n);
            }
            let c = fi.weight * fj.weight * k;
            row_sums[i] += c;
            if j != i {
                row_sums[j] += c;
            }
        }
    }
    let variance: f64 = row_sums.iter().sum();
    if variance <= 0.0 {
        return Ok(SigmaReport {
            sigma: 0.0,
            variance: variance.max(0.0),
            contributions: vec![0.0; nf],
        });
    }
    let sigma = variance.sqrt();
    let contributions = row_sums.iter().map(|r| r / sigma).collect();
    Ok(SigmaReport {
        sigma,
        variance,
        contributions,
    })
}

/// VaR and ES of a coefficient series against its own mean:
/// var = -sum_{n>=1} c_n He_n(eta), es = phi(eta)/alpha sum c_n He_{n-1}.
fn series_var_es(c: &[f64], eta: f64, alpha: f64) -> (f64, f64) {
    let mut row = vec![0.0; c.len()];
    he_row(eta, &mut row);
    let mut var = 0.0;
    let mut es = 0.0;
    for (n, &cn) in c.iter().enumerate().skip(1) {
        var -= cn * row[n];
        es += cn * row[n - 1];
    }
    (var, es * norm_pdf(eta) / alpha)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OneFactorRisk {
    /// Quantile of the principal factor, Phi^-1(alpha).
    pub eta: f64,
    pub var: f64,
    pub es: f64,
    pub var_contributions: Vec<f64>,
    pub es_contributions: Vec<f64>,
}

pub(crate) fn check_alpha(alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 0.5) {
        return Err(CriskError::Config(format!(
            "alpha must lie in (0, 0.5), got {alpha}"
        )));
    }
    norm_inv_cdf(alpha)
}

/// Single-factor VaR and ES on the principal series, with per-facility
/// Euler contributions (the facility's own share of the same series).
pub fn var_es_1f(tail: &TailCoefficients, alpha: f64) -> Result<OneFactorRisk> {
    let eta = check_alpha(alpha)?;
    let slope = tail.onef_derivative(eta, 1);
    if slope < 0.0 {
        return Err(CriskError::NonMonotone { eta, slope });
    }
    let (var, es) = series_var_es(&tail.v1f, eta, alpha);
    let mut var_contributions = Vec::with_capacity(tail.facilities.len());
    let mut es_contributions = Vec::with_capacity(tail.facilities.len());
    for f in &tail.facilities {
        let (v, e) = series_var_es(&f.onef, eta, alpha);
        var_contributions.push(v);
        es_contributions.push(e);
    }
    Ok(OneFactorRisk {
        eta,
        var,
        es,
        var_contributions,
        es_contributions,
    })
}

fn check_slope(p1: f64, eta: f64) -> Result<()> {
    if p1 == 0.0 || !p1.is_finite() {
        return Err(CriskError::SingularDerivative {
            what: "first derivative of the principal series",
        });
    }
    if p1 < 0.0 {
        return Err(CriskError::NonMonotone { eta, slope: p1 });
    }
    Ok(())
}

/// Second or third order VaR adjustment from the conditional moments of the
/// residual and the eta1-derivatives of the principal series (derivs[r] is
/// the r-th derivative at eta1). Positive values raise VaR.
pub fn quantile_adjustment(
    mu: &ConditionalMoments,
    derivs: &[f64; 4],
    eta1: f64,
    order: usize,
) -> Result<f64> {
    let p1 = derivs[1];
    check_slope(p1, eta1)?;
    let p2 = derivs[2];
    let p3 = derivs[3];
    match order {
        2 => Ok((mu.mu2_prime - mu.mu2 * (eta1 + p2 / p1)) / (2.0 * p1)),
        3 => {
            let k = mu.mu3_second - mu.mu3_prime * (2.0 * eta1 + 3.0 * p2 / p1)
                + mu.mu3
                    * ((eta1 * eta1 - 1.0)
                        + 3.0 * eta1 * p2 / p1
                        + (3.0 * p2 * p2 - p1 * p3) / (p1 * p1));
            Ok(-k / (6.0 * p1 * p1))
        }
        other => Err(CriskError::Config(format!(
            "adjustment order must be 2 or 3, got {other}"
        ))),
    }
}

/// Second or third order ES adjustment at eta1 = Phi^-1(alpha).
pub fn es_adjustment(
    mu: &ConditionalMoments,
    derivs: &[f64; 4],
    eta1: f64,
    alpha: f64,
    order: usize,
) -> Result<f64> {
    check_alpha(alpha)?;
    let p1 = derivs[1];
    check_slope(p1, eta1)?;
    let p2 = derivs[2];
    let phi = norm_pdf(eta1);
    match order {
        2 => Ok(phi * mu.mu2 / (2.0 * alpha * p1)),
        3 => {
            let g = mu.mu3_prime - mu.mu3 * (eta1 + p2 / p1);
            Ok(-phi * g / (6.0 * alpha * p1 * p1))
        }
        other => Err(CriskError::Config(format!(
            "adjustment order must be 2 or 3, got {other}"
        ))),
    }
}

/// Gradient of an adjustment with respect to its ingredients; contracted
/// with a facility's Euler bundle it yields w_i d/dw_i of the adjustment.
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct IngredientGradient {
    m2: f64,
    m2p: f64,
    m3: f64,
    m3p: f64,
    m3pp: f64,
    p1: f64,
    p2: f64,
    p3: f64,
}

impl IngredientGradient {
    pub(crate) fn contract(&self, b: &EulerBundle) -> f64 {
        self.m2 * b.mu2
            + self.m2p * b.mu2_prime
            + self.m3 * b.mu3
            + self.m3p * b.mu3_prime
            + self.m3pp * b.mu3_second
            + self.p1 * b.v1f[1]
            + self.p2 * b.v1f[2]
            + self.p3 * b.v1f[3]
    }

    /// Euler contraction with the total ingredient vector: moments carry
    /// weight-degree 2 (mu2 family) and 3 (mu3 family), series levels 1.
    #[cfg(test)]
    fn euler_total(&self, mu: &ConditionalMoments, derivs: &[f64; 4]) -> f64 {
        2.0 * self.m2 * mu.mu2
            + 2.0 * self.m2p * mu.mu2_prime
            + 3.0 * self.m3 * mu.mu3
            + 3.0 * self.m3p * mu.mu3_prime
            + 3.0 * self.m3pp * mu.mu3_second
            + self.p1 * derivs[1]
            + self.p2 * derivs[2]
            + self.p3 * derivs[3]
    }
}

pub(crate) fn var2_gradient(mu: &ConditionalMoments, d: &[f64; 4], eta: f64) -> IngredientGradient {
    let (p1, p2) = (d[1], d[2]);
    IngredientGradient {
        m2p: 1.0 / (2.0 * p1),
        m2: -(eta + p2 / p1) / (2.0 * p1),
        p2: -mu.mu2 / (2.0 * p1 * p1),
        p1: -(mu.mu2_prime - mu.mu2 * eta) / (2.0 * p1 * p1) + mu.mu2 * p2 / (p1 * p1 * p1),
        ..Default::default()
    }
}

pub(crate) fn var3_gradient(mu: &ConditionalMoments, d: &[f64; 4], eta: f64) -> IngredientGradient {
    let (p1, p2, p3) = (d[1], d[2], d[3]);
    let p1sq = p1 * p1;
    let k = mu.mu3_second - mu.mu3_prime * (2.0 * eta + 3.0 * p2 / p1)
        + mu.mu3 * ((eta * eta - 1.0) + 3.0 * eta * p2 / p1 + (3.0 * p2 * p2 - p1 * p3) / p1sq);
    let dk_dp1 = 3.0 * mu.mu3_prime * p2 / p1sq - 3.0 * mu.mu3 * eta * p2 / p1sq
        - 6.0 * mu.mu3 * p2 * p2 / (p1sq * p1)
        + mu.mu3 * p3 / p1sq;
    let dk_dp2 =
        -3.0 * mu.mu3_prime / p1 + 3.0 * mu.mu3 * eta / p1 + 6.0 * mu.mu3 * p2 / p1sq;
    IngredientGradient {
        m3pp: -1.0 / (6.0 * p1sq),
        m3p: (2.0 * eta + 3.0 * p2 / p1) / (6.0 * p1sq),
        m3: -((eta * eta - 1.0) + 3.0 * eta * p2 / p1 + (3.0 * p2 * p2 - p1 * p3) / p1sq)
            / (6.0 * p1sq),
        p1: -dk_dp1 / (6.0 * p1sq) + k / (3.0 * p1sq * p1),
        p2: -dk_dp2 / (6.0 * p1sq),
        p3: mu.mu3 / (6.0 * p1sq * p1),
        ..Default::default()
    }
}

pub(crate) fn es2_gradient(mu: &ConditionalMoments, d: &[f64; 4], eta: f64, alpha: f64) -> IngredientGradient {
    let p1 = d[1];
    let phi = norm_pdf(eta);
    IngredientGradient {
        m2: phi / (2.0 * alpha * p1),
        p1: -phi * mu.mu2 / (2.0 * alpha * p1 * p1),
        ..Default::default()
    }
}

pub(crate) fn es3_gradient(mu: &ConditionalMoments, d: &[f64; 4], eta: f64, alpha: f64) -> IngredientGradient {
    let (p1, p2) = (d[1], d[2]);
    let p1sq = p1 * p1;
    let phi = norm_pdf(eta);
    let g = mu.mu3_prime - mu.mu3 * (eta + p2 / p1);
    IngredientGradient {
        m3p: -phi / (6.0 * alpha * p1sq),
        m3: phi * (eta + p2 / p1) / (6.0 * alpha * p1sq),
        p2: phi * mu.mu3 / (6.0 * alpha * p1sq * p1),
        p1: -phi * mu.mu3 * p2 / (6.0 * alpha * p1sq * p1sq) + phi * g / (3.0 * alpha * p1sq * p1),
        ..Default::default()
    }
}

/// Adjustments at the alpha-quantile of the principal factor, with their
/// per-facility Euler contributions via the chain rule over the conditional
/// moments and the principal-series derivative levels.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjustmentAllocation {
    pub eta: f64,
    pub moments: ConditionalMoments,
    pub var2_total: f64,
    pub var3_total: f64,
    pub es2_total: f64,
    pub es3_total: f64,
    pub var2: Vec<f64>,
    pub var3: Vec<f64>,
    pub es2: Vec<f64>,
    pub es3: Vec<f64>,
}

pub fn allocate_adjustments(tail: &TailCoefficients, alpha: f64) -> Result<AdjustmentAllocation> {
    let eta = check_alpha(alpha)?;
    let ws = MomentWorkspace::new(tail, eta);
    let mu = ws.moments();
    let derivs = [
        tail.onef_derivative(eta, 0),
        tail.onef_derivative(eta, 1),
        tail.onef_derivative(eta, 2),
        tail.onef_derivative(eta, 3),
    ];
    let var2_total = quantile_adjustment(&mu, &derivs, eta, 2)?;
    let var3_total = quantile_adjustment(&mu, &derivs, eta, 3)?;
    let es2_total = es_adjustment(&mu, &derivs, eta, alpha, 2)?;
    let es3_total = es_adjustment(&mu, &derivs, eta, alpha, 3)?;

    let gv2 = var2_gradient(&mu, &derivs, eta);
    let gv3 = var3_gradient(&mu, &derivs, eta);
    let ge2 = es2_gradient(&mu, &derivs, eta, alpha);
    let ge3 = es3_gradient(&mu, &derivs, eta, alpha);

    let n = tail.facilities.len();
    let mut var2 = Vec::with_capacity(n);
    let mut var3 = Vec::with_capacity(n);
    let mut es2 = Vec::with_capacity(n);
    let mut es3 = Vec::with_capacity(n);
    for i in 0..n {
        let b = ws.euler_bundle(tail, i);
        var2.push(gv2.contract(&b));
        var3.push(gv3.contract(&b));
        es2.push(ge2.contract(&b));
        es3.push(ge3.contract(&b));
    }
    Ok(AdjustmentAllocation {
        eta,
        moments: mu,
        var2_total,
        var3_total,
        es2_total,
        es3_total,
        var2,
        var3,
        es2,
        es3,
    })
}
