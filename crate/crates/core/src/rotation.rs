//! Factor-basis rotation that puts the principal risk factor first.
//!
//! The principal direction is the normalized first-order coefficient vector.
//! The rest of the basis is completed from standard basis vectors in index
//! order (skipping the one most parallel to the principal direction) with
//! modified Gram-Schmidt, re-orthogonalized once for stability, so the
//! construction is deterministic across runs and platforms.

use serde::{Deserialize, Serialize};

use crate::error::{CriskError, Result};
use crate::portfolio::Portfolio;

const ORTHO_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rotation {
    /// Rows are the new basis vectors; row 0 is the principal direction.
    matrix: Vec<Vec<f64>>,
    /// The unnormalized first-order vector the rotation was built from.
    source_v1: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// v1 / ||v1||.
pub fn principal_factor(v1: &[f64]) -> Result<Vec<f64>> {
    let n = norm(v1);
    if n == 0.0 || !n.is_finite() {
        return Err(CriskError::DegenerateDirection);
    }
    Ok(v1.iter().map(|x| x / n).collect())
}

/// Orthonormal basis with `y` as its first row.
pub fn build_rotation(y: &[f64]) -> Result<Rotation> {
    let dim = y.len();
    if dim == 0 {
        return Err(CriskError::DegenerateDirection);
    }
    let ny = norm(y);
    if (ny - 1.0).abs() > ORTHO_TOL {
        return Err(CriskError::Domain {
            what: "rotation seed norm",
            value: ny,
        });
    }
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(dim);
    rows.push(y.to_vec());
    // Drop the standard basis vector with the largest overlap with y; the
    // remaining dim-1 seeds are guaranteed to stay independent.
    let skip = (0..dim)
        .max_by(|&a, &b| y[a].abs().total_cmp(&y[b].abs()))
        .unwrap();
    for k in 0..dim {
        if k == skip {
            continue;
        }
        let mut v = vec![0.0; dim];
        v[k] = 1.0;
        // Two MGS passes; the second sweeps out roundoff left by the first.
        for _ in 0..2 {
            for row in &rows {
                let c = dot(&v, row);
                for (vi, ri) in v.iter_mut().zip(row) {
                    *vi -= c * ri;
                }
            }
        }
        let nv = norm(&v);
        if nv < 1e-8 {
            return Err(CriskError::DegenerateDirection);
        }
        for vi in &mut v {
            *vi /= nv;
        }
        rows.push(v);
    }
    Ok(Rotation {
        matrix: rows,
        source_v1: y.to_vec(),
    })
}

/// Rotation built directly from an unnormalized first-order vector.
pub fn rotation_from_v1(v1: &[f64]) -> Result<Rotation> {
    let y = principal_factor(v1)?;
    let mut r = build_rotation(&y)?;
    r.source_v1 = v1.to_vec();
    Ok(r)
}

impl Rotation {
    pub fn dim(&self) -> usize {
        self.matrix.len()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.matrix
    }

    pub fn source_v1(&self) -> &[f64] {
        &self.source_v1
    }

    /// R v: coordinates of v in the rotated basis.
    pub fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.dim() {
            return Err(CriskError::DimensionMismatch {
                expected: self.dim(),
                got: v.len(),
            });
        }
        Ok(self.matrix.iter().map(|row| dot(row, v)).collect())
    }

    /// R^T v: back to original coordinates.
    pub fn apply_transpose(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.dim() {
            return Err(CriskError::DimensionMismatch {
                expected: self.dim(),
                got: v.len(),
            });
        }
        let mut out = vec![0.0; self.dim()];
        for (row, &c) in self.matrix.iter().zip(v) {
            for (o, r) in out.iter_mut().zip(row) {
                *o += c * r;
            }
        }
        Ok(out)
    }

    /// Max deviation of R R^T from the identity.
    pub fn orthogonality_defect(&self) -> f64 {
        let mut worst = 0.0f64;
        for (i, a) in self.matrix.iter().enumerate() {
            for (j, b) in self.matrix.iter().enumerate() {
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((dot(a, b) - target).abs());
            }
        }
        worst
    }
}

/// Replace every loading vector by its rotated-coordinate version. Values,
/// rho and weights are untouched; the factor model keeps its size.
pub fn rotate_portfolio(portfolio: &Portfolio, rotation: &Rotation) -> Result<Portfolio> {
    let dim = portfolio.n_factors();
    if rotation.dim() != dim {
        return Err(CriskError::DimensionMismatch {
            expected: dim,
            got: rotation.dim(),
        });
    }
    let mut out = portfolio.clone();
    for f in &mut out.facilities {
        let dense = f.dense_loadings(dim);
        let rotated = rotation.apply(&dense)?;
        f.loadings = rotated.into_iter().enumerate().collect();
    }
    Ok(out)
}
