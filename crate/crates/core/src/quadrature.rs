//! Gauss-Hermite quadrature against the standard normal weight.
//!
//! Nodes are the roots of `He_m`, obtained as eigenvalues of the symmetric
//! tridiagonal Jacobi matrix (implicit-shift QL, no eigenvectors), then
//! polished with one Newton step on the orthonormal recurrence. Weights come
//! from the Christoffel identity `w_i = 1 / sum_k p_k(x_i)^2` with
//! `p_k = He_k / sqrt(k!)`, so they sum to one for the normalized measure.
//!
//! An m-node rule integrates polynomials times `phi` exactly through degree
//! `2m - 1`; everything in this crate that needs a numeric inner product
//! against `phi` routes through here.

use crate::error::{CriskError, Result};

/// Largest node count the constructor accepts.
pub const MAX_NODES: usize = 512;

#[derive(Debug, Clone)]
pub struct QuadratureRule {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl QuadratureRule {
    /// Gauss-Hermite rule with `m` nodes for `∫ f(x) phi(x) dx`.
    pub fn gauss_hermite(m: usize) -> Result<Self> {
        if m == 0 || m > MAX_NODES {
            return Err(CriskError::Config(format!(
                "quadrature node count {m} outside 1..={MAX_NODES}"
            )));
        }
        if m == 1 {
            return Ok(QuadratureRule {
                nodes: vec![0.0],
                weights: vec![1.0],
            });
        }

        // Jacobi matrix for the monic probabilists' recurrence: zero diagonal,
        // off-diagonal sqrt(k).
        let mut d = vec![0.0f64; m];
        let mut e: Vec<f64> = (1..m).map(|k| (k as f64).sqrt()).collect();
        e.push(0.0);
        tridiag_eigenvalues(&mut d, &mut e).map_err(|_| CriskError::EigenFailure { size: m })?;
        d.sort_by(|a, b| a.partial_cmp(b).unwrap());

        // One Newton step per node: x -= p_m(x) / (sqrt(m) p_{m-1}(x)).
        let mut scratch = vec![0.0f64; m + 1];
        for x in d.iter_mut() {
            orthonormal_row(*x, &mut scratch);
            let pm = scratch[m];
            let pm1 = scratch[m - 1];
            if pm1 != 0.0 {
                *x -= pm / ((m as f64).sqrt() * pm1);
            }
        }

        // The spectrum is symmetric; pair nodes exactly so odd moments vanish
        // identically and reruns cannot pick up sign noise.
        for i in 0..m / 2 {
            let s = 0.5 * (d[m - 1 - i] - d[i]);
            d[i] = -s;
            d[m - 1 - i] = s;
        }
        if m % 2 == 1 {
            d[m / 2] = 0.0;
        }

        let mut weights = vec![0.0f64; m];
        for (i, &x) in d.iter().enumerate() {
            weights[i] = christoffel_weight(m, x);
        }
        for i in 0..m / 2 {
            let w = 0.5 * (weights[i] + weights[m - 1 - i]);
            weights[i] = w;
            weights[m - 1 - i] = w;
        }

        Ok(QuadratureRule { nodes: d, weights })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// `sum_i w_i f(x_i)`, approximating `∫ f phi`.
    pub fn integrate<F: FnMut(f64) -> f64>(&self, mut f: F) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&x, &w)| w * f(x))
            .sum()
    }
}

/// `out[k] = He_k(x) / sqrt(k!)` for `k = 0..out.len()`.
/// The normalized recurrence keeps magnitudes tame out to high order.
fn orthonormal_row(x: f64, out: &mut [f64]) {
    out[0] = 1.0;
    if out.len() == 1 {
        return;
    }
    out[1] = x;
    for k in 1..out.len() - 1 {
        out[k + 1] = (x * out[k] - (k as f64).sqrt() * out[k - 1]) / ((k + 1) as f64).sqrt();
    }
}

/// Christoffel weight `1 / sum_{k<m} p_k(x)^2`.
///
/// Near the extreme nodes of large rules the orthonormal values grow like
/// `exp(x^2/4)`, so the raw sum overflows around 400 nodes even though the
/// weight itself is a perfectly good tiny number. Carry the sum against a
/// power-of-two scale and fold the scale back in at the end; scaling by
/// powers of two is exact, and mid-range nodes never trigger a rescale at
/// all. Past roughly 450 nodes the outermost true weights drop below the
/// smallest subnormal and round to zero, which is the best f64 can say.
fn christoffel_weight(m: usize, x: f64) -> f64 {
    const LIMIT: f64 = 1e280;
    const HALF: f64 = 7.458340731200207e-155; // 2^-512
    let mut prev = 1.0f64;
    let mut cur = x;
    let mut acc = 1.0 + x * x;
    let mut shifts = 0u32;
    for k in 1..m - 1 {
        let next = (x * cur - (k as f64).sqrt() * prev) / ((k + 1) as f64).sqrt();
        prev = cur;
        cur = next;
        acc += cur * cur;
        if acc > LIMIT {
            prev *= HALF;
            cur *= HALF;
            acc *= HALF * HALF;
            shifts += 1;
        }
    }
    // True sum is acc * 2^(1024*shifts); unwind one exact factor at a time so
    // intermediate products stay in range and underflow is the rounded truth.
    let mut w = 1.0 / acc;
    for _ in 0..shifts {
        w *= HALF;
        w *= HALF;
    }
    w
}

/// Eigenvalues of a symmetric tridiagonal matrix by implicit-shift QL.
/// `d` holds the diagonal (overwritten with eigenvalues, unordered);
/// `e[i]` the off-diagonal between rows i and i+1, `e[n-1]` scratch.
fn tridiag_eigenvalues(d: &mut [f64], e: &mut [f64]) -> std::result::Result<(), ()> {
    let n = d.len();
    let mut iter_guard = 0usize;
    for l in 0..n {
        loop {
            let mut m = l;
            while m + 1 < n {
                let dd = d[m].abs() + d[m + 1].abs();
                if e[m].abs() <= f64::EPSILON * dd {
                    break;
                }
                m += 1;
            }
            if m == l {
                break;
            }
            iter_guard += 1;
            if iter_guard > 60 * n {
                return Err(());
            }
            // Wilkinson shift.
            let mut g = (d[l + 1] - d[l]) / (2.0 * e[l]);
            let mut r = g.hypot(1.0);
            g = d[m] - d[l] + e[l] / (g + r.copysign(g));
            let (mut s, mut c) = (1.0f64, 1.0f64);
            let mut p = 0.0f64;
            let mut underflow = false;
            for i in (l..m).rev() {
                let f = s * e[i];
                let b = c * e[i];
                r = f.hypot(g);
                e[i + 1] = r;
                if r == 0.0 {
                    d[i + 1] -= p;
                    e[m] = 0.0;
                    underflow = true;
                    break;
                }
                s = f / r;
                c = g / r;
                g = d[i + 1] - p;
                r = (d[i] - g) * s + 2.0 * c * b;
                p = s * r;
                d[i + 1] = g + p;
                g = c * r - b;
            }
            if underflow {
                continue;
            }
            d[l] -= p;
            e[l] = g;
            e[m] = 0.0;
        }
    }
    Ok(())
}
