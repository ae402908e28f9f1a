//! Probabilists' Hermite polynomials and the product identities the expansion
//! engine is built on.
//!
//! Conventions, fixed once here and relied on everywhere else:
//!
//! * `He_0(x) = 1`, `He_1(x) = x`, `He_{n+1}(x) = x He_n(x) - n He_{n-1}(x)`.
//! * Orthogonality is with respect to the standard normal density
//!   `phi(x) = exp(-x^2/2)/sqrt(2 pi)`, giving `∫ He_n He_m phi = n! δ_nm`.
//! * `He_n'(x) = n He_{n-1}(x)`.
//!
//! Orders are capped at [`MAX_ORDER`]. The cap is a refusal, not a silent
//! truncation: callers that want more resolution have to say so, and 64 is
//! already past the point where f64 coefficient arithmetic stays meaningful
//! for the series this crate assembles.

use crate::error::{CriskError, Result};

/// Hard ceiling on any Hermite order accepted by this crate.
pub const MAX_ORDER: usize = 64;

/// `n!` as f64, exact through 18 and correctly rounded beyond.
/// Indexable up to `2 * MAX_ORDER` so triple-product intermediates stay in range.
pub(crate) fn factorial(n: usize) -> f64 {
    FACTORIALS[n]
}

const FACT_LEN: usize = 2 * MAX_ORDER + 1;

static FACTORIALS: [f64; FACT_LEN] = {
    let mut t = [1.0f64; FACT_LEN];
    let mut i = 1;
    while i < FACT_LEN {
        t[i] = t[i - 1] * i as f64;
        i += 1;
    }
    t
};

/// Binomial coefficient as f64. Exact while the result stays below 2^53,
/// which covers every coefficient the expansion engine asks for.
pub(crate) fn binomial(n: usize, k: usize) -> f64 {
    if k > n {
        return 0.0;
    }
    let k = k.min(n - k);
    let mut acc = 1.0f64;
    for i in 0..k {
        acc = acc * (n - i) as f64 / (i + 1) as f64;
    }
    acc
}

fn check_order(n: usize) -> Result<()> {
    if n > MAX_ORDER {
        Err(CriskError::OrderCap {
            requested: n,
            cap: MAX_ORDER,
        })
    } else {
        Ok(())
    }
}

/// `He_n(x)` by the three-term recurrence.
pub fn he(n: usize, x: f64) -> Result<f64> {
    check_order(n)?;
    Ok(he_unchecked(n, x))
}

pub(crate) fn he_unchecked(n: usize, x: f64) -> f64 {
    let (mut prev, mut cur) = (1.0, x);
    match n {
        0 => return 1.0,
        1 => return x,
        _ => {}
    }
    for k in 1..n {
        let next = x * cur - k as f64 * prev;
        prev = cur;
        cur = next;
    }
    cur
}

/// Fills `out[k] = He_k(x)` for `k = 0..out.len()`.
/// One recurrence pass; this is the bulk form every series evaluation uses.
pub(crate) fn he_row(x: f64, out: &mut [f64]) {
    if out.is_empty() {
        return;
    }
    out[0] = 1.0;
    if out.len() == 1 {
        return;
    }
    out[1] = x;
    for k in 2..out.len() {
        out[k] = x * out[k - 1] - (k - 1) as f64 * out[k - 2];
    }
}

/// `He_n'(x) = n He_{n-1}(x)`.
pub fn he_derivative(n: usize, x: f64) -> Result<f64> {
    check_order(n)?;
    if n == 0 {
        return Ok(0.0);
    }
    Ok(n as f64 * he_unchecked(n - 1, x))
}

/// Closed form of `sum_n He_n(eps) He_n(eta) rho^n / n!` for `|rho| < 1`:
///
/// `(1 - rho^2)^(-1/2) exp( (2 rho eps eta - rho^2 (eps^2 + eta^2)) / (2 (1 - rho^2)) )`
///
/// This is the ratio of the correlated bivariate normal density to the product
/// of its marginals, which is what makes the conditional-expectation series of
/// the portfolio model converge geometrically in `rho`.
pub fn mehler_kernel(eps: f64, eta: f64, rho: f64) -> Result<f64> {
    if !(rho.abs() < 1.0) {
        return Err(CriskError::Domain {
            what: "mehler_kernel correlation",
            value: rho,
        });
    }
    let r2 = rho * rho;
    let z = (2.0 * rho * eps * eta - r2 * (eps * eps + eta * eta)) / (2.0 * (1.0 - r2));
    Ok(z.exp() / (1.0 - r2).sqrt())
}

/// Expands `He_n He_m` back into the Hermite basis:
///
/// `He_n(x) He_m(x) = sum_k C(n,k) C(m,k) k! He_{n+m-2k}(x)`, `k = 0..=min(n,m)`.
///
/// Returned as `(degree, coefficient)` pairs with degrees descending from
/// `n + m`. Coefficients are exact integers held in f64; above roughly order
/// 20 they exceed 2^53 and are correctly rounded instead.
pub fn product_linearization(n: usize, m: usize) -> Result<Vec<(usize, f64)>> {
    check_order(n)?;
    check_order(m)?;
    let mut out = Vec::with_capacity(n.min(m) + 1);
    for k in 0..=n.min(m) {
        let coeff = binomial(n, k) * binomial(m, k) * factorial(k);
        out.push((n + m - 2 * k, coeff));
    }
    Ok(out)
}

/// `∫ He_n He_m He_k phi dx`.
///
/// Nonzero only when `n + m + k` is even and the three orders satisfy the
/// triangle inequality; then
///
/// `n! m! k! / ( ((m+k-n)/2)! ((k+n-m)/2)! ((n+m-k)/2)! )`.
pub fn triple_product_integral(n: usize, m: usize, k: usize) -> Result<f64> {
    check_order(n)?;
    check_order(m)?;
    check_order(k)?;
    let s = n + m + k;
    if s % 2 != 0 {
        return Ok(0.0);
    }
    let h = s / 2;
    // Triangle condition: each order no larger than the sum of the other two.
    if n > h || m > h || k > h {
        return Ok(0.0);
    }
    Ok(factorial(n) / factorial(h - n) * (factorial(m) / factorial(h - m))
        * (factorial(k) / factorial(h - k)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quadrature::QuadratureRule;
    use approx::assert_relative_eq;

    #[test]
    fn low_order_values() {
        // He_2 = x^2 - 1, He_3 = x^3 - 3x at a handful of points.
        for &x in &[-2.5, -1.0, 0.0, 0.3, 1.7] {
            assert_eq!(he(0, x).unwrap(), 1.0);
            assert_eq!(he(1, x).unwrap(), x);
            assert_relative_eq!(he(2, x).unwrap(), x * x - 1.0, max_relative = 1e-15);
            assert_relative_eq!(he(3, x).unwrap(), x * x * x - 3.0 * x, max_relative = 1e-14);
        }
        assert_relative_eq!(he(4, 0.3).unwrap(), 0.3f64.powi(4) - 6.0 * 0.09 + 3.0, epsilon = 1e-14);
    }

    #[test]
    fn order_cap_refuses() {
        assert!(he(MAX_ORDER, 1.0).is_ok());
        assert!(matches!(
            he(MAX_ORDER + 1, 1.0),
            Err(CriskError::OrderCap { requested: 65, cap: 64 })
        ));
        assert!(triple_product_integral(65, 0, 0).is_err());
    }

    #[test]
    fn he_row_matches_scalar() {
        let mut row = [0.0; 20];
        he_row(-1.37, &mut row);
        for (n, v) in row.iter().enumerate() {
            assert_eq!(*v, he(n, -1.37).unwrap());
        }
    }

    #[test]
    fn derivative_matches_finite_difference() {
        let h = 1e-6;
        for n in 1..=10 {
            let x = 0.3;
            let fd = (he(n, x + h).unwrap() - he(n, x - h).unwrap()) / (2.0 * h);
            assert_relative_eq!(he_derivative(n, x).unwrap(), fd, max_relative = 1e-7);
        }
    }

    #[test]
    fn recurrence_consistency() {
        // x He_n = He_{n+1} + n He_{n-1} on a grid, all orders to the cap.
        for n in 1..MAX_ORDER {
            for &x in &[-3.0, -0.7, 0.0, 1.2, 4.0] {
                let lhs = x * he(n, x).unwrap();
                let rhs = he(n + 1, x).unwrap() + n as f64 * he(n - 1, x).unwrap();
                assert_relative_eq!(lhs, rhs, max_relative = 1e-12, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn orthogonality_against_quadrature() {
        // 256-node rule integrates He_n He_m phi exactly for n + m <= 511.
        let rule = QuadratureRule::gauss_hermite(256).unwrap();
        for n in 0..=20usize {
            for m in 0..=20usize {
                let val = rule.integrate(|x| he_unchecked(n, x) * he_unchecked(m, x));
                let expect = if n == m { factorial(n) } else { 0.0 };
                // Scale-aware: n! reaches 2.4e18 at n = 20.
                let scale = factorial(n).max(factorial(m));
                assert!(
                    (val - expect).abs() <= 1e-8 * scale.max(1.0),
                    "n={n} m={m}: got {val}, want {expect}"
                );
            }
        }
    }

    fn mehler_partial_sum(rho: f64, e: f64, t: f64, order: usize) -> f64 {
        let mut sum = 0.0;
        let mut term_scale = 1.0; // rho^n / n!
        for n in 0..=order {
            sum += he_unchecked(n, e) * he_unchecked(n, t) * term_scale;
            term_scale *= rho / (n + 1) as f64;
        }
        sum
    }

    #[test]
    fn mehler_closed_form_matches_series() {
        // Up to |rho| = 0.6 the order-60 partial sum sits far inside 1e-9
        // of the closed form everywhere on the grid.
        for &rho in &[-0.6, -0.3, 0.1, 0.5, 0.6] {
            for &(e, t) in &[(0.0, 0.0), (1.0, -0.5), (2.0, 2.0), (-1.3, 0.4), (3.0, 3.0)] {
                let closed = mehler_kernel(e, t, rho).unwrap();
                let sum = mehler_partial_sum(rho, e, t, 60);
                assert_relative_eq!(closed, sum, max_relative = 1e-9, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn mehler_series_error_shrinks_at_strong_correlation() {
        // At |rho| = 0.9 the tail decays like 0.9^n, so order 60 is not
        // within any tight pointwise tolerance. The property that holds
        // (and the one relied on downstream) is that the worst-case error
        // over an (eps, eta) grid keeps falling with truncation order.
        let grid = [-3.0, -1.5, 0.0, 1.5, 3.0];
        for &rho in &[-0.9, 0.9] {
            let mut errs = Vec::new();
            for order in (10..=60).step_by(10) {
                let mut worst = 0.0f64;
                for &e in &grid {
                    for &t in &grid {
                        let closed = mehler_kernel(e, t, rho).unwrap();
                        worst = worst.max((mehler_partial_sum(rho, e, t, order) - closed).abs());
                    }
                }
                errs.push(worst);
            }
            for pair in errs.windows(2) {
                assert!(
                    pair[1] <= pair[0] * (1.0 + 1e-9),
                    "rho={rho}: error rose {pair:?}"
                );
            }
            let (first, last) = (errs[0], errs[errs.len() - 1]);
            assert!(last <= 0.05 * first, "rho={rho}: {first} -> {last}");
            assert!(last < 1.0, "rho={rho}: residual {last}");
        }
    }

    #[test]
    fn mehler_rejects_unit_correlation() {
        assert!(mehler_kernel(0.0, 0.0, 1.0).is_err());
        assert!(mehler_kernel(0.0, 0.0, -1.0).is_err());
        assert!(mehler_kernel(0.0, 0.0, f64::NAN).is_err());
    }

    #[test]
    fn product_linearization_small_cases() {
        // He_1^2 = He_2 + He_0.
        let p = product_linearization(1, 1).unwrap();
        assert_eq!(p, vec![(2, 1.0), (0, 1.0)]);
        // He_0 He_m = He_m.
        let p = product_linearization(0, 7).unwrap();
        assert_eq!(p, vec![(7, 1.0)]);
    }

    #[test]
    fn product_linearization_pointwise() {
        for (n, m) in [(2, 3), (4, 4), (5, 2), (7, 6)] {
            for &x in &[-2.1, 0.0, 0.9, 3.3] {
                let direct = he_unchecked(n, x) * he_unchecked(m, x);
                let via_sum: f64 = product_linearization(n, m)
                    .unwrap()
                    .iter()
                    .map(|&(d, c)| c * he_unchecked(d, x))
                    .sum();
                assert_relative_eq!(direct, via_sum, max_relative = 1e-10, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn triple_product_known_values() {
        assert_eq!(triple_product_integral(1, 2, 3).unwrap(), 6.0);
        assert_eq!(triple_product_integral(1, 1, 1).unwrap(), 0.0); // odd sum
        assert_eq!(triple_product_integral(1, 1, 2).unwrap(), 2.0);
        assert_eq!(triple_product_integral(0, 0, 0).unwrap(), 1.0);
        assert_eq!(triple_product_integral(0, 4, 4).unwrap(), factorial(4));
        assert_eq!(triple_product_integral(1, 1, 4).unwrap(), 0.0); // triangle fails
    }

    #[test]
    fn triple_product_fully_symmetric() {
        for (n, m, k) in [(2, 3, 5), (4, 4, 2), (1, 2, 3), (6, 3, 3)] {
            let base = triple_product_integral(n, m, k).unwrap();
            for (a, b, c) in [(n, k, m), (m, n, k), (m, k, n), (k, n, m), (k, m, n)] {
                assert_eq!(triple_product_integral(a, b, c).unwrap(), base);
            }
        }
    }

    #[test]
    fn triple_product_against_quadrature() {
        // Tolerance is relative to the quadrature's own L1 mass: for the
        // parity-odd cases the exact answer is 0 but the sum cancels terms
        // of size ~1e13, so "zero" can only mean zero at that conditioning.
        let rule = QuadratureRule::gauss_hermite(64).unwrap();
        for n in 0..=10usize {
            for m in n..=10usize {
                for k in m..=10usize {
                    let (mut num, mut l1) = (0.0f64, 0.0f64);
                    for (&x, &w) in rule.nodes().iter().zip(rule.weights()) {
                        let t = w * he_unchecked(n, x) * he_unchecked(m, x) * he_unchecked(k, x);
                        num += t;
                        l1 += t.abs();
                    }
                    let formula = triple_product_integral(n, m, k).unwrap();
                    let scale = formula.abs().max(l1).max(1.0);
                    assert!(
                        (num - formula).abs() <= 1e-8 * scale,
                        "({n},{m},{k}): quadrature {num} vs formula {formula}"
                    );
                }
            }
        }
    }
}
