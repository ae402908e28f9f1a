//! Hermite coefficients of a facility's value function and of its square and
//! cube.
//!
//! The coefficient of order n is c_n = E[f(eps) He_n(eps)] for f = v, v^2,
//! v^3, so that E[f | s] = sum_n rho^n/n! c_n He_n(s). Step-type specs get
//! the closed form: each threshold jump contributes
//! `jump * He_{n-1}(c) phi(c)` (from d/dx[-He_{n-1} phi] = He_n phi), which
//! sidesteps quadrature ringing at the discontinuity entirely. Curves go
//! through a fixed Gauss-Hermite rule; their Gaussian-smoothed conditional
//! means are analytic, so the rule converges spectrally.

use crate::error::{CriskError, Result};
use crate::gaussian::{norm_cdf, norm_pdf};
use crate::hermite::{factorial, he_row, MAX_ORDER};
use crate::portfolio::ValueSpec;
use crate::quadrature::QuadratureRule;

/// Nodes used for the smooth-spec integrals.
const CURVE_NODES: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientSet {
    /// Coefficients of the value itself, orders 0..=N.
    pub v: Vec<f64>,
    /// Coefficients of the squared value.
    pub w: Vec<f64>,
    /// Coefficients of the cubed value.
    pub u: Vec<f64>,
}

impl CoefficientSet {
    pub fn order(&self) -> usize {
        self.v.len() - 1
    }

    /// Zero every coefficient above `order`; used by tests that need an
    /// expansion that terminates exactly.
    pub fn truncated(&self, order: usize) -> CoefficientSet {
        let cut = |xs: &[f64]| {
            xs.iter()
                .enumerate()
                .map(|(n, &x)| if n <= order { x } else { 0.0 })
                .collect()
        };
        CoefficientSet {
            v: cut(&self.v),
            w: cut(&self.w),
            u: cut(&self.u),
        }
    }
}

fn step_coefficients(thresholds: &[f64], values: &[f64], order: usize) -> Vec<f64> {
    let mut c = vec![0.0; order + 1];
    let mut lower = 0.0;
    for (j, &val) in values.iter().enumerate() {
        let upper = if j < thresholds.len() {
            norm_cdf(thresholds[j])
        } else {
            1.0
        };
        c[0] += val * (upper - lower);
        lower = upper;
    }
    if order == 0 {
        return c;
    }
    let mut row = vec![0.0; order];
    for (j, &t) in thresholds.iter().enumerate() {
        let jump = values[j + 1] - values[j];
        let scale = jump * norm_pdf(t);
        he_row(t, &mut row);
        for n in 1..=order {
            c[n] += scale * row[n - 1];
        }
    }
    c
}

/// Coefficient sets for v, v^2, v^3 up to `order`.
pub fn facility_coefficients(spec: &ValueSpec, order: usize) -> Result<CoefficientSet> {
    if order > MAX_ORDER {
        return Err(CriskError::OrderCap {
            requested: order,
            cap: MAX_ORDER,
        });
    }
    if let Some((thresholds, values)) = spec.as_steps() {
        let sq: Vec<f64> = values.iter().map(|v| v * v).collect();
        let cb: Vec<f64> = values.iter().map(|v| v * v * v).collect();
        Ok(CoefficientSet {
            v: step_coefficients(&thresholds, &values, order),
            w: step_coefficients(&thresholds, &sq, order),
            u: step_coefficients(&thresholds, &cb, order),
        })
    } else {
        let rule = QuadratureRule::gauss_hermite(CURVE_NODES)?;
        let mut v = vec![0.0; order + 1];
        let mut w = vec![0.0; order + 1];
        let mut u = vec![0.0; order + 1];
        let mut row = vec![0.0; order + 1];
        for (&x, &wt) in rule.nodes().iter().zip(rule.weights()) {
            let f = spec.evaluate(x);
            he_row(x, &mut row);
            for n in 0..=order {
                let base = wt * row[n];
                v[n] += base * f;
                w[n] += base * f * f;
                u[n] += base * f * f * f;
            }
        }
        Ok(CoefficientSet { v, w, u })
    }
}

/// sum_{n<=order} rho^n/n! c_n He_n(eta) for one coefficient list.
pub fn series_value(coeffs: &[f64], rho: f64, eta: f64, order: usize) -> f64 {
    let top = order.min(coeffs.len().saturating_sub(1));
    let mut row = vec![0.0; top + 1];
    he_row(eta, &mut row);
    let mut acc = 0.0;
    let mut rho_n = 1.0;
    for n in 0..=top {
        acc += rho_n / factorial(n) * coeffs[n] * row[n];
        rho_n *= rho;
    }
    acc
}

/// Truncated conditional expected value E[v | systematic = eta].
pub fn single_factor_value(cs: &CoefficientSet, rho: f64, eta: f64, order: usize) -> f64 {
    series_value(&cs.v, rho, eta, order)
}
